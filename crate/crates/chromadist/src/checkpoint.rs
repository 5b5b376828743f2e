//! Model persistence. One container for both model kinds:
//!
//! ```text
//! magic "CDST" | version u16 LE | kind u8 (1 = baseline, 2 = cdest)
//! baseline: resolution u32, sigma f64, hue_mode u8,
//!           entry count u32, then per description:
//!           name (u32 length + UTF-8), observation count u64,
//!           3 * resolution f64 masses
//! cdest:    vocab u32, embed u32, hidden u32, resolution u32,
//!           sigma f64, hue_mode u8,
//!           vocab tokens (u32 length + UTF-8 each, in index order),
//!           weight blocks as row-major f32 in the fixed block order
//! ```
//!
//! All integers and floats are little-endian. Writes go through a temp file
//! and a rename so interrupted runs never leave truncated checkpoints.

use crate::baseline::HistogramModel;
use crate::cdest::{CdestModel, CdestParameters, ModelDims};
use crate::corpus::Vocabulary;
use crate::discretize::{BinnedDistribution, BlurMode, DiscretizerConfig};
use crate::error::{Error, Result};
use rand::SeedableRng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CDST";
const VERSION: u16 = 1;
const KIND_BASELINE: u8 = 1;
const KIND_CDEST: u8 = 2;

/// Either fitted model, as read back from disk.
pub enum Checkpoint {
    Baseline(HistogramModel),
    Cdest(Box<CdestModel>),
}

impl Checkpoint {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Checkpoint::Baseline(_) => "baseline",
            Checkpoint::Cdest(_) => "cdest",
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            Checkpoint::Baseline(m) => m.config().resolution,
            Checkpoint::Cdest(m) => m.params.dims().resolution,
        }
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, x: u8) -> Result<()> {
        Ok(self.0.write_all(&[x])?)
    }
    fn u16(&mut self, x: u16) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    fn u32(&mut self, x: u32) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    fn u64(&mut self, x: u64) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    fn f64(&mut self, x: f64) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    fn f32(&mut self, x: f32) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        Ok(self.0.write_all(s.as_bytes())?)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| corrupt("unexpected end of file"))?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(corrupt(format!("string length {len} implausibly large")));
        }
        String::from_utf8(self.bytes(len)?).map_err(|_| corrupt("invalid UTF-8 in string"))
    }
}

fn hue_mode_byte(mode: BlurMode) -> u8 {
    match mode {
        BlurMode::Truncated => 0,
        BlurMode::Wrapped => 1,
    }
}

fn hue_mode_from(byte: u8) -> Result<BlurMode> {
    match byte {
        0 => Ok(BlurMode::Truncated),
        1 => Ok(BlurMode::Wrapped),
        other => Err(corrupt(format!("unknown hue mode byte {other}"))),
    }
}

fn write_config<W: Write>(w: &mut Writer<W>, config: &DiscretizerConfig) -> Result<()> {
    w.u32(config.resolution as u32)?;
    w.f64(config.sigma)?;
    w.u8(hue_mode_byte(config.hue_mode))
}

fn read_config<R: Read>(r: &mut Reader<R>) -> Result<DiscretizerConfig> {
    let resolution = r.u32()? as usize;
    let sigma = r.f64()?;
    let hue_mode = hue_mode_from(r.u8()?)?;
    let mut config = DiscretizerConfig::new(resolution, sigma)
        .map_err(|e| corrupt(format!("invalid discretizer config: {e}")))?;
    config.hue_mode = hue_mode;
    Ok(config)
}

fn atomic_write(path: &Path, body: impl FnOnce(&mut Writer<BufWriter<File>>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = Writer(BufWriter::new(File::create(&tmp)?));
        body(&mut w)?;
        w.0.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_baseline(model: &HistogramModel, path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        w.0.write_all(MAGIC)?;
        w.u16(VERSION)?;
        w.u8(KIND_BASELINE)?;
        write_config(w, model.config())?;
        let entries: Vec<_> = model.entries().collect();
        w.u32(entries.len() as u32)?;
        for (desc, entry) in entries {
            w.str(desc)?;
            w.u64(entry.count as u64)?;
            for dist in &entry.dists {
                for &m in dist.masses() {
                    w.f64(m)?;
                }
            }
        }
        Ok(())
    })
}

pub fn save_cdest(model: &CdestModel, path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        w.0.write_all(MAGIC)?;
        w.u16(VERSION)?;
        w.u8(KIND_CDEST)?;
        let dims = model.params.dims();
        w.u32(dims.vocab as u32)?;
        w.u32(dims.embed as u32)?;
        w.u32(dims.hidden as u32)?;
        w.u32(dims.resolution as u32)?;
        w.f64(model.discretizer.sigma)?;
        w.u8(hue_mode_byte(model.discretizer.hue_mode))?;
        for token in model.vocabulary.tokens() {
            w.str(token)?;
        }
        for block in model.params.blocks() {
            for &x in block {
                w.f32(x)?;
            }
        }
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    match r.u8()? {
        KIND_BASELINE => load_baseline_body(&mut r),
        KIND_CDEST => load_cdest_body(&mut r),
        other => Err(corrupt(format!("unknown model kind byte {other}"))),
    }
}

/// Loads and additionally checks the stored resolution against an expected
/// one, so a resolution-64 checkpoint cannot silently serve a 256-bin query.
pub fn load_checkpoint_with_resolution(path: &Path, expected: Option<usize>) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if let Some(n) = expected {
        if ckpt.resolution() != n {
            return Err(Error::Config(format!(
                "checkpoint has resolution {}, expected {n}",
                ckpt.resolution()
            )));
        }
    }
    Ok(ckpt)
}

fn load_baseline_body<R: Read>(r: &mut Reader<R>) -> Result<Checkpoint> {
    let config = read_config(r)?;
    let n = config.resolution;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let desc = r.str()?;
        let obs_count = r.u64()? as usize;
        let mut dists = Vec::with_capacity(3);
        for _ in 0..3 {
            let masses: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
            dists.push(
                BinnedDistribution::new(masses)
                    .map_err(|e| corrupt(format!("invalid stored distribution: {e}")))?,
            );
        }
        let dists: [BinnedDistribution; 3] = dists.try_into().unwrap();
        entries.push((desc, obs_count, dists));
    }
    Ok(Checkpoint::Baseline(HistogramModel::from_entries(
        config, entries,
    )))
}

fn load_cdest_body<R: Read>(r: &mut Reader<R>) -> Result<Checkpoint> {
    let vocab = r.u32()? as usize;
    let embed = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let resolution = r.u32()? as usize;
    let sigma = r.f64()?;
    let hue_mode = hue_mode_from(r.u8()?)?;
    if vocab == 0 || embed == 0 || hidden == 0 || resolution < 2 {
        return Err(corrupt("implausible model dimensions"));
    }
    let tokens: Vec<String> = (0..vocab).map(|_| r.str()).collect::<Result<_>>()?;
    let vocabulary = Vocabulary::from_tokens(&tokens);
    if vocabulary.len() != vocab {
        return Err(corrupt("duplicate tokens in stored vocabulary"));
    }
    let dims = ModelDims {
        vocab,
        embed,
        hidden,
        resolution,
    };
    // allocate via init then overwrite every block from the file
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params: CdestParameters<f32> = CdestParameters::init(dims, &mut rng);
    for block in params.blocks_mut() {
        for slot in block.iter_mut() {
            *slot = r.f32()?;
        }
    }
    let mut discretizer = DiscretizerConfig::new(resolution, sigma)
        .map_err(|e| corrupt(format!("invalid discretizer config: {e}")))?;
    discretizer.hue_mode = hue_mode;
    Ok(Checkpoint::Cdest(Box::new(CdestModel {
        params,
        vocabulary,
        discretizer,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::fit_baseline;
    use crate::cdest::{predict, train, CdestConfig};
    use crate::corpus::synthetic::generate_synthetic;
    use crate::corpus::{ColorPoint, Observation};

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn trained_cdest() -> CdestModel {
        let corpus = generate_synthetic(2, 2, 1, 20).unwrap();
        let mut config = CdestConfig::new(DiscretizerConfig::with_resolution(8).unwrap());
        config.embed_dim = 4;
        config.hidden_dim = 8;
        config.dropout = 0.0;
        config.max_epochs = 2;
        train(&corpus.full, &config).unwrap().0
    }

    #[test]
    fn cdest_round_trip_is_bit_identical() {
        let model = trained_cdest();
        let dir = tmpdir();
        let path = dir.path().join("model.ckpt");
        save_cdest(&model, &path).unwrap();
        let loaded = match load_checkpoint(&path).unwrap() {
            Checkpoint::Cdest(m) => m,
            _ => panic!("wrong kind"),
        };
        assert_eq!(model.params, loaded.params);
        let desc = "dark red";
        assert_eq!(predict(&model, desc).unwrap(), predict(&loaded, desc).unwrap());
    }

    #[test]
    fn baseline_round_trip_preserves_predictions() {
        let config = DiscretizerConfig::with_resolution(8).unwrap();
        let train: Vec<Observation> = (0..10)
            .map(|i| Observation {
                description: "teal".into(),
                tokens: vec![],
                color: ColorPoint::new(0.5, 0.1 * i as f64, 0.6).unwrap(),
            })
            .collect();
        let model = fit_baseline(&train, config).unwrap();
        let dir = tmpdir();
        let path = dir.path().join("baseline.ckpt");
        save_baseline(&model, &path).unwrap();
        let loaded = match load_checkpoint(&path).unwrap() {
            Checkpoint::Baseline(m) => m,
            _ => panic!("wrong kind"),
        };
        assert_eq!(model, loaded);
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let model = trained_cdest();
        let dir = tmpdir();
        let path = dir.path().join("model.ckpt");
        save_cdest(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn bad_magic_is_a_clean_error() {
        let dir = tmpdir();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE and some trailing bytes").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn resolution_mismatch_rejected_at_load() {
        let model = trained_cdest();
        let dir = tmpdir();
        let path = dir.path().join("model.ckpt");
        save_cdest(&model, &path).unwrap();
        assert!(load_checkpoint_with_resolution(&path, Some(8)).is_ok());
        assert!(matches!(
            load_checkpoint_with_resolution(&path, Some(256)),
            Err(Error::Config(_))
        ));
    }
}
