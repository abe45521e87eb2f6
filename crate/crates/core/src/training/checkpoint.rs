//! Binary checkpoint of a [`Trainer`].
//!
//! Layout, little-endian:
//!
//! ```text
//! "TSVRCKPT"  version:u8  section_count:u32
//! section*:   name_len:u32 name  kind:u8  payload_len:u32 payload
//! ```
//!
//! A matrix payload (kind 0) is `rows:u32 cols:u32` followed by the `f64`
//! entries row-major. A table payload (kind 1) is `count:u32` followed by
//! entries `key_len:u32 key type:u8 value:[u8; 8]`, with type 0 for `f64`
//! and 1 for `u64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{DomainTag, RunningStats};
use crate::losses::DomainClassifier;
use crate::model::{AlignmentMode, Model, NormUnit};
use crate::numerics::Matrix;

use super::adam::Adam;
use super::config::TrainConfig;
use super::sampler::EpochSampler;
use super::trainer::{Trainer, SOURCE_SAMPLER_STREAM, TARGET_SAMPLER_STREAM};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSVRCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

const KIND_MATRIX: u8 = 0;
const KIND_TABLE: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    F64(f64),
    U64(u64),
}

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    Matrix(Matrix),
    Table(Vec<(String, Scalar)>),
}

fn ckpt_err(section: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        section: section.into(),
        message: message.into(),
    }
}

struct Writer {
    sections: Vec<(String, Payload)>,
}

impl Writer {
    fn matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.sections.push((name.into(), Payload::Matrix(m.clone())));
    }

    fn table(&mut self, name: &str, entries: Vec<(&str, Scalar)>) {
        let entries = entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        self.sections.push((name.to_string(), Payload::Table(entries)));
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let mut body = Vec::new();
            let kind = match payload {
                Payload::Matrix(m) => {
                    body.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                    body.extend_from_slice(&(m.cols() as u32).to_le_bytes());
                    for v in m.data() {
                        body.extend_from_slice(&v.to_le_bytes());
                    }
                    KIND_MATRIX
                }
                Payload::Table(entries) => {
                    body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
                    for (k, v) in entries {
                        body.extend_from_slice(&(k.len() as u32).to_le_bytes());
                        body.extend_from_slice(k.as_bytes());
                        match v {
                            Scalar::F64(x) => {
                                body.push(0);
                                body.extend_from_slice(&x.to_le_bytes());
                            }
                            Scalar::U64(x) => {
                                body.push(1);
                                body.extend_from_slice(&x.to_le_bytes());
                            }
                        }
                    }
                    KIND_TABLE
                }
            };
            out.push(kind);
            out.extend_from_slice(&(body.len() as u32).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &str, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ckpt_err(
                section,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &str, what: &str) -> Result<u8> {
        Ok(self.take(1, section, what)?[0])
    }

    fn u32(&mut self, section: &str, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section, what)?.try_into().unwrap()))
    }

    fn word(&mut self, section: &str, what: &str) -> Result<[u8; 8]> {
        Ok(self.take(8, section, what)?.try_into().unwrap())
    }

    fn string(&mut self, section: &str, what: &str) -> Result<String> {
        let n = self.u32(section, what)? as usize;
        let raw = self.take(n, section, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ckpt_err(section, format!("{what} is not UTF-8")))
    }
}

fn decode_payload(kind: u8, body: &[u8], section: &str) -> Result<Payload> {
    let mut c = Cursor { bytes: body, pos: 0 };
    let payload = match kind {
        KIND_MATRIX => {
            let rows = c.u32(section, "matrix rows")? as usize;
            let cols = c.u32(section, "matrix cols")? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(c.word(section, "matrix entry")?));
            }
            Payload::Matrix(Matrix::from_vec(rows, cols, data)?)
        }
        KIND_TABLE => {
            let count = c.u32(section, "table size")? as usize;
            let mut entries = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                let key = c.string(section, "table key")?;
                let ty = c.u8(section, "value type")?;
                let raw = c.word(section, "table value")?;
                let v = match ty {
                    0 => Scalar::F64(f64::from_le_bytes(raw)),
                    1 => Scalar::U64(u64::from_le_bytes(raw)),
                    t => return Err(ckpt_err(section, format!("unknown value type {t} for `{key}`"))),
                };
                entries.push((key, v));
            }
            Payload::Table(entries)
        }
        k => return Err(ckpt_err(section, format!("unknown section kind {k}"))),
    };
    if c.pos != body.len() {
        return Err(ckpt_err(section, format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(payload)
}

fn decode_sections(bytes: &[u8]) -> Result<BTreeMap<String, Payload>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(8, "header", "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ckpt_err("header", "bad magic, expected `TSVRCKPT`"));
    }
    let version = c.u8("header", "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            "header",
            format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let count = c.u32("header", "section count")?;
    let mut out = BTreeMap::new();
    for i in 0..count {
        let placeholder = format!("#{i}");
        let name = c.string(&placeholder, "section name")?;
        let kind = c.u8(&name, "section kind")?;
        let len = c.u32(&name, "payload length")? as usize;
        let body = c.take(len, &name, "payload")?;
        let payload = decode_payload(kind, body, &name)?;
        if out.insert(name.clone(), payload).is_some() {
            return Err(ckpt_err(name, "duplicate section"));
        }
    }
    if c.pos != bytes.len() {
        return Err(ckpt_err("trailer", format!("{} unexpected trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

struct Reader {
    sections: BTreeMap<String, Payload>,
}

impl Reader {
    fn matrix(&self, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        match self.sections.get(name) {
            Some(Payload::Matrix(m)) if m.shape() == shape => Ok(m.clone()),
            Some(Payload::Matrix(m)) => Err(ckpt_err(
                name,
                format!("shape {:?} does not match the model's {shape:?}", m.shape()),
            )),
            Some(Payload::Table(_)) => Err(ckpt_err(name, "expected a matrix, found a table")),
            None => Err(ckpt_err(name, "missing")),
        }
    }

    fn table(&self, name: &str) -> Result<Table<'_>> {
        match self.sections.get(name) {
            Some(Payload::Table(entries)) => Ok(Table { name: name.to_string(), entries }),
            Some(Payload::Matrix(_)) => Err(ckpt_err(name, "expected a table, found a matrix")),
            None => Err(ckpt_err(name, "missing")),
        }
    }
}

struct Table<'a> {
    name: String,
    entries: &'a [(String, Scalar)],
}

impl Table<'_> {
    fn get(&self, key: &str) -> Result<Scalar> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| ckpt_err(&self.name, format!("missing key `{key}`")))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        match self.get(key)? {
            Scalar::F64(v) => Ok(v),
            Scalar::U64(_) => Err(ckpt_err(&self.name, format!("`{key}` should be f64"))),
        }
    }

    fn u64(&self, key: &str) -> Result<u64> {
        match self.get(key)? {
            Scalar::U64(v) => Ok(v),
            Scalar::F64(_) => Err(ckpt_err(&self.name, format!("`{key}` should be u64"))),
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.u64(key)?).map_err(|_| ckpt_err(&self.name, format!("`{key}` out of range")))
    }
}

/// Every running-statistics set in the metric network with a stable name.
fn stats_slots(model: &mut Model) -> Vec<(String, &mut RunningStats)> {
    let mut out = Vec::new();
    for (i, unit) in model.metric.norm_units_mut().into_iter().enumerate() {
        let layer = format!("metric.norm{}", i + 1);
        match unit {
            Some(NormUnit::DomainSpecific(l)) => {
                let [s, t] = l.running_all_mut();
                out.push((format!("{layer}.{}", DomainTag::Source), s));
                out.push((format!("{layer}.{}", DomainTag::Target), t));
            }
            Some(NormUnit::Shared(l)) => out.push((format!("{layer}.shared"), l.running_mut())),
            None => {}
        }
    }
    out
}

fn write_adam(w: &mut Writer, prefix: &str, opt: &Adam, names: &[String]) {
    w.table(
        prefix,
        vec![
            ("step", Scalar::U64(opt.step)),
            ("beta1", Scalar::F64(opt.beta1)),
            ("beta2", Scalar::F64(opt.beta2)),
            ("epsilon", Scalar::F64(opt.epsilon)),
        ],
    );
    for (slot, name) in opt.slots.iter().zip(names) {
        w.matrix(format!("{prefix}.m/{name}"), &slot.m);
        w.matrix(format!("{prefix}.v/{name}"), &slot.v);
    }
}

fn read_adam(r: &Reader, prefix: &str, opt: &mut Adam, names: &[String]) -> Result<()> {
    let t = r.table(prefix)?;
    opt.step = t.u64("step")?;
    opt.beta1 = t.f64("beta1")?;
    opt.beta2 = t.f64("beta2")?;
    opt.epsilon = t.f64("epsilon")?;
    for (slot, name) in opt.slots.iter_mut().zip(names) {
        slot.m = r.matrix(&format!("{prefix}.m/{name}"), slot.m.shape())?;
        slot.v = r.matrix(&format!("{prefix}.v/{name}"), slot.v.shape())?;
    }
    Ok(())
}

fn classifier_names(clf: &DomainClassifier) -> Vec<String> {
    clf.params().into_iter().map(|(n, _)| format!("classifier.{n}")).collect()
}

impl Trainer {
    /// Serializes the complete training state.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let m = &self.model.config;
        let mut w = Writer { sections: Vec::new() };
        w.table(
            "config",
            vec![
                ("learning_rate", Scalar::F64(c.learning_rate)),
                ("max_iterations", Scalar::U64(c.max_iterations as u64)),
                ("batch_size", Scalar::U64(c.batch_size as u64)),
                ("lambda_rec", Scalar::F64(c.lambda_rec)),
                ("lambda_ent", Scalar::F64(c.lambda_ent)),
                ("lambda_align", Scalar::F64(c.lambda_align)),
                ("bn_momentum", Scalar::F64(c.bn_momentum)),
                ("bn_epsilon", Scalar::F64(c.bn_epsilon)),
                ("alignment_mode", Scalar::U64(c.alignment_mode.code())),
                ("seed", Scalar::U64(c.seed)),
                ("log_every", Scalar::U64(c.log_every as u64)),
                ("encoder_hidden", Scalar::U64(c.encoder_hidden as u64)),
                ("metric_hidden", Scalar::U64(c.metric_hidden as u64)),
                ("embed_dim", Scalar::U64(m.embed_dim as u64)),
                ("classifier_hidden", Scalar::U64(c.classifier_hidden as u64)),
                ("feature_dim", Scalar::U64(m.feature_dim as u64)),
                ("attribute_dim", Scalar::U64(m.attribute_dim as u64)),
            ],
        );
        let (se, sc) = self.source_sampler.state();
        let (te, tc) = self.target_sampler.state();
        w.table(
            "progress",
            vec![
                ("iteration", Scalar::U64(self.iteration as u64)),
                ("source_len", Scalar::U64(self.source_sampler.len() as u64)),
                ("source_epoch", Scalar::U64(se)),
                ("source_cursor", Scalar::U64(sc as u64)),
                ("target_len", Scalar::U64(self.target_sampler.len() as u64)),
                ("target_epoch", Scalar::U64(te)),
                ("target_cursor", Scalar::U64(tc as u64)),
            ],
        );
        let names: Vec<String> = self.model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in self.model.named_params() {
            w.matrix(format!("param/{name}"), p);
        }
        let mut model = self.model.clone();
        for (name, stats) in stats_slots(&mut model) {
            w.matrix(format!("stats/{name}.mean"), &stats.mean);
            w.matrix(format!("stats/{name}.std"), &stats.std);
            w.table(&format!("stats/{name}.seen"), vec![("seen", Scalar::U64(stats.seen as u64))]);
        }
        write_adam(&mut w, "adam", &self.optimizer, &names);
        if let (Some(clf), Some(opt)) = (&self.classifier, &self.classifier_optimizer) {
            let names = classifier_names(clf);
            for ((_, p), name) in clf.params().into_iter().zip(&names) {
                w.matrix(format!("param/{name}"), p);
            }
            write_adam(&mut w, "classifier_adam", opt, &names);
        }
        w.encode()
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let r = Reader {
            sections: decode_sections(bytes)?,
        };
        let t = r.table("config")?;
        let code = t.u64("alignment_mode")?;
        let alignment_mode = AlignmentMode::from_code(code)
            .ok_or_else(|| ckpt_err("config", format!("unknown alignment mode code {code}")))?;
        let config = TrainConfig {
            learning_rate: t.f64("learning_rate")?,
            max_iterations: t.usize("max_iterations")?,
            batch_size: t.usize("batch_size")?,
            lambda_rec: t.f64("lambda_rec")?,
            lambda_ent: t.f64("lambda_ent")?,
            lambda_align: t.f64("lambda_align")?,
            bn_momentum: t.f64("bn_momentum")?,
            bn_epsilon: t.f64("bn_epsilon")?,
            alignment_mode,
            seed: t.u64("seed")?,
            log_every: t.usize("log_every")?,
            encoder_hidden: t.usize("encoder_hidden")?,
            metric_hidden: t.usize("metric_hidden")?,
            embed_dim: Some(t.usize("embed_dim")?),
            classifier_hidden: t.usize("classifier_hidden")?,
        };
        config
            .validate()
            .map_err(|e| ckpt_err("config", e.to_string()))?;
        let model_config = config.model_config(t.usize("feature_dim")?, t.usize("attribute_dim")?);
        let mut model = Model::zeros(model_config).map_err(|e| ckpt_err("config", e.to_string()))?;

        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let shapes: Vec<(usize, usize)> = model.named_params().iter().map(|(_, p)| p.shape()).collect();
        for ((p, name), shape) in model.params_mut().into_iter().zip(&names).zip(&shapes) {
            *p = r.matrix(&format!("param/{name}"), *shape)?;
        }
        for (name, stats) in stats_slots(&mut model) {
            stats.mean = r.matrix(&format!("stats/{name}.mean"), stats.mean.shape())?;
            stats.std = r.matrix(&format!("stats/{name}.std"), stats.std.shape())?;
            stats.seen = r.table(&format!("stats/{name}.seen"))?.u64("seen")? != 0;
        }
        let mut optimizer = Adam::new(model.named_params().into_iter().map(|(_, p)| p));
        read_adam(&r, "adam", &mut optimizer, &names)?;

        let (classifier, classifier_optimizer) = if alignment_mode == AlignmentMode::Dann {
            let mut clf = DomainClassifier {
                hidden: crate::layers::LinearLayer::zeros(config.metric_hidden, config.classifier_hidden),
                output: crate::layers::LinearLayer::zeros(config.classifier_hidden, 1),
            };
            let names = classifier_names(&clf);
            let shapes: Vec<(usize, usize)> = clf.params().iter().map(|(_, p)| p.shape()).collect();
            for ((p, name), shape) in clf.params_mut().into_iter().zip(&names).zip(&shapes) {
                *p = r.matrix(&format!("param/{name}"), *shape)?;
            }
            let mut opt = Adam::new(clf.params().into_iter().map(|(_, p)| p));
            read_adam(&r, "classifier_adam", &mut opt, &names)?;
            (Some(clf), Some(opt))
        } else {
            (None, None)
        };

        let p = r.table("progress")?;
        let source_sampler = EpochSampler::restore(
            p.usize("source_len")?,
            config.seed,
            SOURCE_SAMPLER_STREAM,
            p.u64("source_epoch")?,
            p.usize("source_cursor")?,
        );
        let target_sampler = EpochSampler::restore(
            p.usize("target_len")?,
            config.seed,
            TARGET_SAMPLER_STREAM,
            p.u64("target_epoch")?,
            p.usize("target_cursor")?,
        );
        Ok(Self {
            iteration: p.usize("iteration")?,
            config,
            model,
            optimizer,
            classifier,
            classifier_optimizer,
            source_sampler,
            target_sampler,
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec, ZslDataset};

    fn dataset() -> ZslDataset {
        generate_synthetic(&SyntheticSpec {
            num_source_classes: 5,
            num_target_classes: 3,
            feature_dim: 6,
            attribute_dim: 4,
            samples_per_class: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn config(mode: AlignmentMode) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            encoder_hidden: 5,
            metric_hidden: 6,
            classifier_hidden: 3,
            alignment_mode: mode,
            seed: 8,
            ..Default::default()
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = dataset();
        let view = ds.training_view();
        for mode in AlignmentMode::ALL {
            let mut straight = Trainer::new(config(mode), &view).unwrap();
            straight.run_until(&view, 10, |_, _| Ok(())).unwrap();

            let mut first = Trainer::new(config(mode), &view).unwrap();
            first.run_until(&view, 6, |_, _| Ok(())).unwrap();
            let mut resumed = Trainer::from_checkpoint_bytes(&first.to_checkpoint_bytes()).unwrap();
            resumed.run_until(&view, 10, |_, _| Ok(())).unwrap();

            assert_eq!(resumed.model, straight.model, "{mode}");
            assert_eq!(resumed.optimizer, straight.optimizer, "{mode}");
            assert_eq!(resumed.classifier, straight.classifier, "{mode}");
            assert_eq!(resumed.iteration(), 10);
        }
    }

    #[test]
    fn header_and_truncation_errors() {
        let ds = dataset();
        let t = Trainer::new(config(AlignmentMode::Dsbn), &ds.training_view()).unwrap();
        let bytes = t.to_checkpoint_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Trainer::from_checkpoint_bytes(&bad).unwrap_err().to_string().contains("header"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Trainer::from_checkpoint_bytes(&bad).unwrap_err().to_string().contains("version"));

        let err = Trainer::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("section `") && err.contains("truncated"), "{err}");
        let err = Trainer::from_checkpoint_bytes(&bytes[..200]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn missing_section_is_named() {
        let ds = dataset();
        let t = Trainer::new(config(AlignmentMode::None), &ds.training_view()).unwrap();
        let mut w = Writer { sections: Vec::new() };
        let full = decode_sections(&t.to_checkpoint_bytes()).unwrap();
        for (name, payload) in full {
            if name != "param/metric.output.bias" {
                w.sections.push((name, payload));
            }
        }
        let err = Trainer::from_checkpoint_bytes(&w.encode()).unwrap_err().to_string();
        assert!(err.contains("param/metric.output.bias"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let ds = dataset();
        let view = ds.training_view();
        let mut t = Trainer::new(config(AlignmentMode::SingleBn), &view).unwrap();
        t.run_until(&view, 2, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        t.save_checkpoint(&path).unwrap();
        let back = Trainer::load_checkpoint(&path).unwrap();
        assert_eq!(back.model, t.model);
        assert_eq!(back.config, TrainConfig { embed_dim: Some(6), ..t.config.clone() });
    }
}
