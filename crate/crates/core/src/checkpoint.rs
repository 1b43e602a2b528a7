//! Checkpoint directories: a JSON manifest, JSON training state and little-endian
//! binary tensor files. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamGroup;
use crate::error::{DgadError, Result};
use crate::losses::LossReport;
use crate::networks::{NamedTensor, NetConfig, Networks, ParamStore};
use crate::optim::Adam;
use crate::tensor::{Real, Tensor};
use crate::trainer::{TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 8] = b"DGADTNS1";
const MANIFEST: &str = "manifest.json";
const STATE: &str = "state.json";
const OPTIMIZER: &str = "optimizer.bin";
const STORES: [(ParamGroup, &str); 3] = [
    (ParamGroup::Encoder, "encoder.bin"),
    (ParamGroup::Decoder, "decoder.bin"),
    (ParamGroup::Discriminator, "discriminator.bin"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub iteration: u64,
    pub config: TrainConfig,
    pub components: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateFile {
    iteration: u64,
    gen_step: u64,
    disc_step: u64,
    rng: RngState,
    /// Running loss averages as IEEE-754 bit patterns, keyed by field name.
    running_bits: BTreeMap<String, u64>,
}

/// Everything needed to resume training or to score with a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub nets: Networks<f32>,
    pub state: TrainState,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> DgadError {
    DgadError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn encode_tensors<T: Real>(entries: &[(String, u8, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(T::NAME.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, kind, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(*kind);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(ckpt_err(self.path, "truncated tensor file")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_tensors<T: Real>(bytes: &[u8], path: &Path) -> Result<Vec<(String, u8, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != TENSOR_MAGIC {
        return Err(ckpt_err(path, "not a tensor file"));
    }
    if r.take(3)? != T::NAME.as_bytes() {
        return Err(ckpt_err(path, format!("expected {} tensors", T::NAME)));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| ckpt_err(path, "tensor name is not UTF-8"))?;
        let kind = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| ckpt_err(path, "tensor too large"))?;
        let raw = r.take(
            numel
                .checked_mul(T::BYTES)
                .ok_or_else(|| ckpt_err(path, "tensor too large"))?,
        )?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((name, kind, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(path, "trailing bytes after tensors"));
    }
    Ok(out)
}

fn store_bytes<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let entries: Vec<_> = store
        .params
        .iter()
        .map(|p| (p.name.clone(), 0u8, &p.value))
        .chain(store.buffers.iter().map(|b| (b.name.clone(), 1u8, &b.value)))
        .collect();
    encode_tensors(&entries)
}

fn read_component(dir: &Path, file: &str) -> Result<Vec<u8>> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(ckpt_err(dir, format!("missing component `{file}`")));
    }
    fs::read(&path).map_err(|e| DgadError::io(&path, e))
}

fn load_store<T: Real>(dir: &Path, file: &str, target: &mut ParamStore<T>) -> Result<()> {
    let path = dir.join(file);
    let entries = decode_tensors::<T>(&read_component(dir, file)?, &path)?;
    let mut loaded = ParamStore {
        group: target.group,
        params: Vec::new(),
        buffers: Vec::new(),
    };
    for (name, kind, value) in entries {
        let nt = NamedTensor { name, value };
        match kind {
            0 => loaded.params.push(nt),
            1 => loaded.buffers.push(nt),
            k => return Err(ckpt_err(&path, format!("unknown tensor kind {k}"))),
        }
    }
    target
        .load_from(&loaded)
        .map_err(|e| ckpt_err(&path, format!("component `{file}` does not fit the network: {e}")))
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Encoder => "encoder",
        ParamGroup::Decoder => "decoder",
        ParamGroup::Discriminator => "discriminator",
    }
}

fn parse_group(s: &str) -> Option<ParamGroup> {
    STORES.iter().map(|(g, _)| *g).find(|g| group_name(*g) == s)
}

fn optimizer_bytes(gen: &Adam<f32>, disc: &Adam<f32>) -> Vec<u8> {
    let mut entries = Vec::new();
    for (prefix, opt) in [("gen", gen), ("disc", disc)] {
        for ((group, idx), (m, v)) in &opt.moments {
            let base = format!("{prefix}/{}/{idx}", group_name(*group));
            entries.push((format!("{base}/m"), 0u8, m));
            entries.push((format!("{base}/v"), 0u8, v));
        }
    }
    encode_tensors(&entries)
}

fn load_optimizer(dir: &Path, gen: &mut Adam<f32>, disc: &mut Adam<f32>) -> Result<()> {
    let path = dir.join(OPTIMIZER);
    let entries = decode_tensors::<f32>(&read_component(dir, OPTIMIZER)?, &path)?;
    let mut seen = 0usize;
    for (name, _, value) in entries {
        let parts: Vec<&str> = name.split('/').collect();
        let bad = || ckpt_err(&path, format!("unexpected optimizer entry `{name}`"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let opt = match parts[0] {
            "gen" => &mut *gen,
            "disc" => &mut *disc,
            _ => return Err(bad()),
        };
        let group = parse_group(parts[1]).ok_or_else(bad)?;
        let idx: usize = parts[2].parse().map_err(|_| bad())?;
        let slot = opt.moments.get_mut(&(group, idx)).ok_or_else(bad)?;
        let target = match parts[3] {
            "m" => &mut slot.0,
            "v" => &mut slot.1,
            _ => return Err(bad()),
        };
        if target.shape() != value.shape() {
            return Err(ckpt_err(&path, format!("optimizer entry `{name}` has wrong shape")));
        }
        *target = value;
        seen += 1;
    }
    let expected = 2 * (gen.moments.len() + disc.moments.len());
    if seen != expected {
        return Err(ckpt_err(
            &path,
            format!("expected {expected} optimizer tensors, found {seen}"),
        ));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DgadError::io(path, e))
}

/// Write a checkpoint to `dir`, replacing any previous one there.
pub fn save_checkpoint(config: &TrainConfig, state: &TrainState, nets: &Networks<f32>, dir: &Path) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| ckpt_err(dir, "checkpoint path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let tmp: PathBuf = dir.with_file_name(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| DgadError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| DgadError::io(&tmp, e))?;

    let mut components = Vec::new();
    for (store, (_, file)) in nets.stores().into_iter().zip(STORES) {
        write_file(&tmp.join(file), &store_bytes(store))?;
        components.push(file.to_string());
    }
    write_file(&tmp.join(OPTIMIZER), &optimizer_bytes(&state.gen_opt, &state.disc_opt))?;
    components.push(OPTIMIZER.to_string());

    let running_bits = state
        .running
        .fields()
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_bits()))
        .collect();
    let st = StateFile {
        iteration: state.iteration,
        gen_step: state.gen_opt.step,
        disc_step: state.disc_opt.step,
        rng: RngState {
            seed: state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        running_bits,
    };
    write_file(&tmp.join(STATE), serde_json::to_string_pretty(&st)?.as_bytes())?;
    components.push(STATE.to_string());

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: f32::NAME.to_string(),
        iteration: state.iteration,
        config: config.clone(),
        components,
    };
    write_file(&tmp.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| DgadError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| DgadError::io(dir, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_component(dir, MANIFEST)?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| ckpt_err(dir, format!("unreadable manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            dir,
            format!("unsupported format version {}", m.format_version),
        ));
    }
    if m.dtype != f32::NAME {
        return Err(ckpt_err(dir, format!("unsupported dtype {}", m.dtype)));
    }
    Ok(m)
}

fn parse_rng(dir: &Path, r: &RngState) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let bad = || ckpt_err(dir, "malformed RNG state");
    if r.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&r.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.stream);
    rng.set_word_pos(r.word_pos.parse::<u128>().map_err(|_| bad())?);
    Ok(rng)
}

/// Load a checkpoint. When `expected` is given, the stored network configuration must equal it.
pub fn load_checkpoint(dir: &Path, expected: Option<&NetConfig>) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let config = manifest
        .config
        .clone()
        .resolved()
        .map_err(|e| ckpt_err(dir, e.to_string()))?;
    if let Some(exp) = expected {
        if exp != &config.net {
            return Err(ckpt_err(
                dir,
                format!(
                    "network configuration mismatch: checkpoint has {:?}, expected {:?}",
                    config.net, exp
                ),
            ));
        }
    }
    let mut nets = Networks::<f32>::new(&config.net, config.seed)?;
    load_store(dir, STORES[0].1, &mut nets.encoder.store)?;
    load_store(dir, STORES[1].1, &mut nets.decoder.store)?;
    load_store(dir, STORES[2].1, &mut nets.discriminator.store)?;

    let st_bytes = read_component(dir, STATE)?;
    let st: StateFile =
        serde_json::from_slice(&st_bytes).map_err(|e| ckpt_err(dir, format!("unreadable training state: {e}")))?;
    if st.iteration != manifest.iteration {
        return Err(ckpt_err(dir, "manifest and state disagree on the iteration"));
    }
    let mut state = TrainState::new(&config, &nets);
    state.iteration = st.iteration;
    state.gen_opt.step = st.gen_step;
    state.disc_opt.step = st.disc_step;
    state.rng = parse_rng(dir, &st.rng)?;
    let mut running = LossReport::default();
    {
        let get = |k: &str| -> Result<f64> {
            st.running_bits
                .get(k)
                .map(|&b| f64::from_bits(b))
                .ok_or_else(|| ckpt_err(dir, format!("running average `{k}` missing")))
        };
        running.rec = get("rec")?;
        running.cls_d = get("cls_d")?;
        running.cls_g = get("cls_g")?;
        running.cmp = get("cmp")?;
        running.adv_d = get("adv_d")?;
        running.adv_g = get("adv_g")?;
        running.total_d = get("total_d")?;
        running.total_g = get("total_g")?;
    }
    state.running = running;
    load_optimizer(dir, &mut state.gen_opt, &mut state.disc_opt)?;
    Ok(Checkpoint { config, nets, state })
}
