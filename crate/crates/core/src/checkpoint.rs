//! `VTCK` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VTCK" | u32 version | u32 tensor count
//! per tensor: u32 name length | name bytes | u8 rank | u64 extent * rank | f32 * numel
//! u64 snapshot length | snapshot bytes (UTF-8)
//! ```
//!
//! The snapshot is config text (see [`crate::config`]) plus a
//! `[checkpoint]` section with the stage tag and RNG state and a `[vocab]`
//! section holding the vocabularies as JSON.

use std::path::Path;

use crate::config::{Document, Entry, RunConfig};
use crate::data::{VocabKind, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{Recognizer, RecognizerConfig};
use crate::model::{is_stage2_param, VisTrans, Vocabs};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"VTCK";
pub const VERSION: u32 = 1;

/// Raw container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub snapshot: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str, wide: bool) -> Result<usize> {
        let n = if wide { self.u64(what)? } else { u64::from(self.u32(what)?) };
        usize::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} length {n} does not fit in memory")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u32::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank of `{name}` exceeds 255")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.snapshot.len() as u64).to_le_bytes());
        out.extend_from_slice(self.snapshot.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"VTCK\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let n = r.len("tensor name", false)?;
            let name = std::str::from_utf8(r.take(n, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len("extent", true)?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let data = r
                .take(numel, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let n = r.len("snapshot", true)?;
        let snapshot = String::from_utf8(r.take(n, "snapshot")?.to_vec())
            .map_err(|_| Error::Checkpoint("snapshot is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors, snapshot })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// What produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
    Recognizer,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Recognizer => "recognizer",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "recognizer" => Ok(Stage::Recognizer),
            _ => Err(Error::Checkpoint(format!("unknown stage tag `{s}`"))),
        }
    }
}

/// Provenance stored in the `[checkpoint]` section.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Meta {
    pub stage: Stage,
    /// Seed of the data-order stream and the number of optimizer steps
    /// taken, enough to resume the stream deterministically.
    pub rng_seed: u64,
    pub steps: u64,
    /// Digest of the stage-1 checkpoint a stage-2 run started from.
    pub parent: Option<String>,
}

/// FNV-1a over the bytes, as 16 hex digits.
pub fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn vocab_json(v: &Vocabulary) -> Result<String> {
    Ok(serde_json::to_string(v.tokens())?)
}

fn snapshot_text(run: &RunConfig, meta: &Meta, vocabs: &[(&str, &Vocabulary)]) -> Result<String> {
    let mut s = run.to_text();
    s.push_str("\n[checkpoint]\n");
    s.push_str(&format!("stage = {}\nrng_seed = {}\nsteps = {}\n", meta.stage.tag(), meta.rng_seed, meta.steps));
    if let Some(p) = &meta.parent {
        s.push_str(&format!("parent = {p}\n"));
    }
    s.push_str("\n[vocab]\n");
    for (name, v) in vocabs {
        s.push_str(&format!("{name} = {}\n", vocab_json(v)?));
        if v.kind() == VocabKind::Subword {
            s.push_str(&format!("{name}_merges = {}\n", serde_json::to_string(v.merges())?));
        }
    }
    Ok(s)
}

/// Decoded snapshot.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub run: RunConfig,
    pub meta: Meta,
    vocab: Vec<Entry>,
}

impl Snapshot {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::parse(text)?;
        let ck = doc
            .take("checkpoint")
            .ok_or_else(|| Error::Checkpoint("snapshot has no [checkpoint] section".into()))?;
        let vocab = doc.take("vocab").unwrap_or_default();
        let get = |k: &str| ck.iter().find(|e| e.key == k).map(|e| e.value.as_str());
        let num = |k: &str| -> Result<u64> {
            get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("[checkpoint] needs a numeric `{k}`")))
        };
        let meta = Meta {
            stage: Stage::parse(get("stage").unwrap_or(""))?,
            rng_seed: num("rng_seed")?,
            steps: num("steps")?,
            parent: get("parent").map(str::to_owned),
        };
        let run = RunConfig::from_document(&doc, None)?;
        Ok(Snapshot { run, meta, vocab })
    }

    pub fn vocabulary(&self, name: &str, kind: VocabKind) -> Result<Vocabulary> {
        let find = |k: &str| {
            self.vocab
                .iter()
                .find(|e| e.key == k)
                .map(|e| e.value.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("snapshot lacks vocabulary `{k}`")))
        };
        let tokens: Vec<String> = serde_json::from_str(find(name)?)?;
        let merges: Vec<(String, String)> = if kind == VocabKind::Subword {
            serde_json::from_str(find(&format!("{name}_merges"))?)?
        } else {
            Vec::new()
        };
        Vocabulary::from_parts(kind, tokens, merges)
    }
}

/// All parameters of `store` plus the snapshot.
pub fn pack<T: crate::tensor::Float>(
    store: &ParamStore<T>,
    run: &RunConfig,
    meta: &Meta,
    vocabs: &[(&str, &Vocabulary)],
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.cast())).collect(),
        snapshot: snapshot_text(run, meta, vocabs)?,
    })
}

pub fn pack_model(store: &ParamStore<f32>, run: &RunConfig, meta: &Meta, vocabs: &Vocabs) -> Result<Checkpoint> {
    pack(store, run, meta, &[("subword", &vocabs.subword), ("chars", &vocabs.chars)])
}

/// Overwrites every parameter of `store` from `ckpt`. Shapes must match
/// and no tensor may be missing or extra.
pub fn fill_store(store: &mut ParamStore<f32>, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.tensors.len() != store.len() {
        let missing: Vec<&str> = store
            .iter()
            .map(|(_, p)| p.name.as_str())
            .filter(|n| ckpt.tensor(n).is_none())
            .collect();
        if let Some(m) = missing.first() {
            return Err(Error::Checkpoint(format!("{} tensors missing, first `{m}`", missing.len())));
        }
    }
    for (name, t) in &ckpt.tensors {
        store.load_value(name, t.clone())?;
    }
    Ok(())
}

/// A VisTrans model restored from a checkpoint.
pub struct Restored {
    pub snapshot: Snapshot,
    pub vocabs: Vocabs,
    pub model: VisTrans,
    pub store: ParamStore<f32>,
}

/// Restores a model checkpoint. `need` is the stage the caller requires:
/// a stage-1 request accepts both stages and a stage-2 request needs the
/// stage-2 tensors. Any stage-2 checkpoint must also carry every stage-1
/// tensor.
pub fn restore_model(ckpt: &Checkpoint, need: Stage) -> Result<Restored> {
    let snapshot = Snapshot::parse(&ckpt.snapshot)?;
    let stage = snapshot.meta.stage;
    if stage == Stage::Recognizer {
        return Err(Error::Checkpoint("this is a recognizer checkpoint, not a model".into()));
    }
    if need == Stage::Stage2 && stage != Stage::Stage2 {
        return Err(Error::Dependency(
            "a stage-2 checkpoint is required; this one holds only the stage-1 model".into(),
        ));
    }
    let vocabs = Vocabs {
        subword: snapshot.vocabulary("subword", VocabKind::Subword)?,
        chars: snapshot.vocabulary("chars", VocabKind::Char)?,
    };
    let cfg = snapshot.run.model_config();
    let mut store = ParamStore::new();
    let model = VisTrans::new(&cfg, &mut store)?;
    let stage1_missing: Vec<&str> = store
        .iter()
        .map(|(_, p)| p.name.as_str())
        .filter(|n| !is_stage2_param(n) && ckpt.tensor(n).is_none())
        .collect();
    if let Some(first) = stage1_missing.first() {
        return Err(Error::Dependency(format!(
            "{} stage-1 tensors missing (first `{first}`); stage 2 depends on a trained stage-1 model",
            stage1_missing.len()
        )));
    }
    if stage == Stage::Stage1 {
        for (name, t) in &ckpt.tensors {
            if !is_stage2_param(name) {
                store.load_value(name, t.clone())?;
            }
        }
    } else {
        fill_store(&mut store, ckpt)?;
    }
    Ok(Restored {
        snapshot,
        vocabs,
        model,
        store,
    })
}

pub fn pack_recognizer(rec: &Recognizer, run: &RunConfig, meta: &Meta) -> Result<Checkpoint> {
    pack(&rec.store, run, meta, &[("chars", &rec.chars)])
}

/// Rebuilds a recognizer saved by [`pack_recognizer`].
pub fn restore_recognizer(ckpt: &Checkpoint) -> Result<(Recognizer, Snapshot)> {
    let snapshot = Snapshot::parse(&ckpt.snapshot)?;
    if snapshot.meta.stage != Stage::Recognizer {
        return Err(Error::Checkpoint(format!(
            "expected a recognizer checkpoint, got {}",
            snapshot.meta.stage.tag()
        )));
    }
    let chars = snapshot.vocabulary("chars", VocabKind::Char)?;
    let cfg = RecognizerConfig::for_model(&snapshot.run.model, snapshot.run.seed);
    let mut rec = Recognizer::new(cfg, chars)?;
    fill_store(&mut rec.store, ckpt)?;
    Ok((rec, snapshot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck::{fixture_config, fixture_vocabs};
    use crate::model::S2CVariant;

    fn micro_checkpoint(stage: Stage) -> (Checkpoint, Vocabs) {
        let vocabs = fixture_vocabs();
        let mut run = RunConfig::preset("micro").unwrap();
        run.model = fixture_config(&vocabs, S2CVariant::Sat(2));
        run.model.seed = 0;
        let mut store = ParamStore::<f32>::new();
        VisTrans::new(&run.model_config(), &mut store).unwrap();
        let meta = Meta {
            stage,
            rng_seed: 5,
            steps: 12,
            parent: (stage == Stage::Stage2).then(|| "00ff".into()),
        };
        (pack_model(&store, &run, &meta, &vocabs).unwrap(), vocabs)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (ck, vocabs) = micro_checkpoint(Stage::Stage2);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = restore_model(&back, Stage::Stage2).unwrap();
        assert_eq!(restored.vocabs.subword, vocabs.subword);
        assert_eq!(restored.vocabs.chars, vocabs.chars);
        assert_eq!(restored.snapshot.meta.steps, 12);
        assert_eq!(restored.snapshot.meta.parent.as_deref(), Some("00ff"));
        let again = pack_model(&restored.store, &restored.snapshot.run, &restored.snapshot.meta, &restored.vocabs).unwrap();
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_magic_and_truncation() {
        let (ck, _) = micro_checkpoint(Stage::Stage1);
        let mut bytes = ck.to_bytes().unwrap();
        let msg = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(msg.contains("truncated"), "{msg}");
        bytes[5] = 9;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn stage2_without_stage1_tensors_is_a_dependency_error() {
        let (mut ck, _) = micro_checkpoint(Stage::Stage2);
        ck.tensors.retain(|(n, _)| is_stage2_param(n));
        let err = restore_model(&ck, Stage::Stage2).err().unwrap();
        assert!(matches!(err, Error::Dependency(_)), "{err}");
        let (ck1, _) = micro_checkpoint(Stage::Stage1);
        assert!(matches!(restore_model(&ck1, Stage::Stage2), Err(Error::Dependency(_))));
    }

    #[test]
    fn shape_disagreement_is_reported() {
        let (mut ck, _) = micro_checkpoint(Stage::Stage1);
        ck.tensors[0].1 = Tensor::zeros(vec![1, 1, 1]);
        let msg = restore_model(&ck, Stage::Stage1).err().unwrap().to_string();
        assert!(msg.contains("shape"), "{msg}");
    }
}
