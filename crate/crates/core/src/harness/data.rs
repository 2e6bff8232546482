//! Synthetic fine-grained, multi-domain image benchmark.
//!
//! Coarse classes are background texture families; fine classes are 5×5
//! binary motifs that differ from their siblings in a handful of cells.
//! A domain is a photometric transform applied after the motif is drawn,
//! followed by pixel noise.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSSH";
pub const FORMAT_VERSION: u32 = 1;
pub const MOTIF: usize = 5;
const CHANNELS: usize = 3;

/// Photometric style of a domain: `clamp(gain·x^gamma + bias + noise)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub channel_gain: [f64; 3],
    pub channel_bias: [f64; 3],
    pub gamma: f64,
    pub noise_std: f64,
}

impl DomainStyle {
    pub fn identity() -> Self {
        Self {
            channel_gain: [1.0; 3],
            channel_bias: [0.0; 3],
            gamma: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn default_source() -> Self {
        Self {
            noise_std: 0.02,
            ..Self::identity()
        }
    }

    pub fn default_target() -> Self {
        Self {
            channel_gain: [0.45, 0.9, 1.5],
            channel_bias: [0.15, -0.05, -0.15],
            gamma: 0.5,
            noise_std: 0.08,
        }
    }

    fn apply(&self, image: &mut [f32], noise_rng: &mut impl Rng) {
        let plane = image.len() / CHANNELS;
        for (k, chan) in image.chunks_mut(plane).enumerate() {
            for v in chan {
                let x = (*v as f64).max(0.0).powf(self.gamma);
                let mut y = self.channel_gain[k] * x + self.channel_bias[k];
                if self.noise_std > 0.0 {
                    y += self.noise_std * noise_rng.sample::<f64, _>(StandardNormal);
                }
                *v = y.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_coarse: usize,
    /// Fine classes per coarse class; its sum is the number of fine classes.
    pub fine_per_coarse: Vec<usize>,
    pub image_size: usize,
    /// `domains[0]` is the source domain, the rest are unseen targets.
    pub domains: Vec<DomainStyle>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Motif cells flipped per sibling class.
    pub variant_cells: usize,
    /// Motif corners are drawn from multiples of this stride.
    pub motif_stride: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_coarse: 3,
            fine_per_coarse: vec![3, 3, 2],
            image_size: 32,
            domains: vec![DomainStyle::default_source(), DomainStyle::default_target()],
            train_per_class: 250,
            test_per_class: 60,
            variant_cells: 4,
            motif_stride: 4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn num_fine(&self) -> usize {
        self.fine_per_coarse.iter().sum()
    }

    /// Coarse parent of every fine class.
    pub fn hierarchy(&self) -> Vec<usize> {
        self.fine_per_coarse
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_coarse == 0 || self.fine_per_coarse.len() != self.num_coarse {
            return fail(format!(
                "fine_per_coarse has {} entries for {} coarse classes",
                self.fine_per_coarse.len(),
                self.num_coarse
            ));
        }
        if self.fine_per_coarse.contains(&0) {
            return fail("every coarse class needs at least one fine class".into());
        }
        if self.num_coarse > 3 {
            return fail("only three texture families are available".into());
        }
        if self.motif_stride == 0 || self.image_size < MOTIF + 1 + self.motif_stride {
            return fail(format!(
                "image_size {} too small for motif stride {}",
                self.image_size, self.motif_stride
            ));
        }
        if self.domains.len() < 2 {
            return fail("need a source and at least one target domain".into());
        }
        let max_variants = self.fine_per_coarse.iter().max().copied().unwrap_or(1);
        if self.variant_cells * max_variants > MOTIF * MOTIF {
            return fail("too many variant cells for a 5×5 motif".into());
        }
        Ok(())
    }
}

/// One labelled image, `[3, S, S]` row-major in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Vec<f32>,
    pub fine: u16,
    pub coarse: u16,
    pub domain: u16,
}

impl SyntheticSample {
    pub fn image_tensor(&self, size: usize) -> Tensor {
        Tensor::new(
            &[CHANNELS, size, size],
            self.image.iter().map(|&v| v as f64).collect(),
        )
        .expect("image shape")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the selected samples into `[B, 3, S, S]`.
    pub fn batch_images(&self, indices: &[usize]) -> Tensor {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * s * s);
        for &i in indices {
            data.extend(self.samples[i].image.iter().map(|&v| v as f64));
        }
        Tensor::new(&[indices.len(), CHANNELS, s, s], data).expect("batch shape")
    }

    pub fn label_histogram(&self, num_fine: usize) -> Vec<usize> {
        let mut h = vec![0; num_fine];
        for s in &self.samples {
            h[s.fine as usize] += 1;
        }
        h
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes()).map_err(io)?;
        for s in &self.samples {
            for v in &s.image {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            w.write_all(&s.fine.to_le_bytes()).map_err(io)?;
            w.write_all(&s.coarse.to_le_bytes()).map_err(io)?;
            w.write_all(&s.domain.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a container. The image side is recovered from the record size.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing HSSH magic"));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = word(8) as usize;
        let body = bytes.len() - 12;
        if count == 0 {
            return if body == 0 {
                Ok(Dataset::default())
            } else {
                Err(bad("trailing bytes after empty header"))
            };
        }
        if body % count != 0 {
            return Err(bad("body is not a whole number of records"));
        }
        let record = body / count;
        let payload = record.checked_sub(6).ok_or_else(|| bad("record too short"))?;
        if payload % (4 * CHANNELS) != 0 {
            return Err(bad("image payload is not 3 f32 planes"));
        }
        let pixels = payload / (4 * CHANNELS);
        let size = (pixels as f64).sqrt().round() as usize;
        if size * size != pixels {
            return Err(bad("image planes are not square"));
        }
        let mut samples = Vec::with_capacity(count);
        for rec in bytes[12..].chunks_exact(record) {
            let image = rec[..payload]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let half = |o: usize| u16::from_le_bytes([rec[payload + o], rec[payload + o + 1]]);
            samples.push(SyntheticSample {
                image,
                fine: half(0),
                coarse: half(2),
                domain: half(4),
            });
        }
        Ok(Dataset {
            image_size: size,
            samples,
        })
    }
}

/// The three splits of a generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub const FILES: [&'static str; 3] = ["train.bin", "val.bin", "test.bin"];

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ds) in Self::FILES.iter().zip([&self.train, &self.val, &self.test]) {
            ds.write(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::read(&dir.join(Self::FILES[0]))?,
            val: Dataset::read(&dir.join(Self::FILES[1]))?,
            test: Dataset::read(&dir.join(Self::FILES[2]))?,
        })
    }
}

/// Fine-class motifs: one random base per coarse class, siblings flip
/// disjoint cell sets of it.
pub fn motifs(cfg: &SyntheticConfig) -> Vec<[bool; MOTIF * MOTIF]> {
    let mut rng = stream_rng(cfg.seed, Stream::Data, u64::MAX);
    let mut out = Vec::new();
    for &n in &cfg.fine_per_coarse {
        let mut base = [false; MOTIF * MOTIF];
        for cell in base.iter_mut() {
            *cell = rng.gen_bool(0.5);
        }
        let mut cells: Vec<usize> = (0..MOTIF * MOTIF).collect();
        cells.shuffle(&mut rng);
        for j in 0..n {
            let mut m = base;
            for &c in &cells[j * cfg.variant_cells..(j + 1) * cfg.variant_cells] {
                m[c] = !m[c];
            }
            out.push(m);
        }
    }
    out
}

/// Everything about a sample except its domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSpec {
    pub fine: usize,
    pub content_seed: u64,
    pub noise_seed: u64,
}

/// Draws the texture and motif for `spec`, then applies `style`.
pub fn render(
    cfg: &SyntheticConfig,
    motifs: &[[bool; MOTIF * MOTIF]],
    hierarchy: &[usize],
    spec: SampleSpec,
    style: &DomainStyle,
) -> Vec<f32> {
    let s = cfg.image_size;
    let mut rng = stream_rng(spec.content_seed, Stream::Data, 0);
    let coarse = hierarchy[spec.fine];
    let pattern = texture(coarse, s, &mut rng);
    let mut image = vec![0f32; CHANNELS * s * s];
    for k in 0..CHANNELS {
        let lo: f64 = rng.gen_range(0.15..0.45);
        let hi: f64 = rng.gen_range(0.55..0.85);
        for (i, &p) in pattern.iter().enumerate() {
            image[k * s * s + i] = (lo + (hi - lo) * p) as f32;
        }
    }
    let slots = (s - MOTIF - 1) / cfg.motif_stride;
    let top = cfg.motif_stride * rng.gen_range(1..=slots);
    let left = cfg.motif_stride * rng.gen_range(1..=slots);
    let motif = &motifs[spec.fine];
    for r in 0..MOTIF {
        for c in 0..MOTIF {
            let v = if motif[r * MOTIF + c] { 1.0 } else { 0.0 };
            for k in 0..CHANNELS {
                image[k * s * s + (top + r) * s + left + c] = v;
            }
        }
    }
    let mut noise_rng = stream_rng(spec.noise_seed, Stream::Data, 1);
    style.apply(&mut image, &mut noise_rng);
    image
}

/// Grayscale texture in `[0, 1]` for a coarse family.
fn texture(family: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    match family {
        // stripes
        0 => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.gen_range(0.25..0.5);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos() * freq, angle.sin() * freq);
            for y in 0..s {
                for x in 0..s {
                    out[y * s + x] = 0.5 + 0.5 * (dx * x as f64 + dy * y as f64 + phase).sin();
                }
            }
        }
        // blobs
        1 => {
            let n = rng.gen_range(3..=5);
            let blobs: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.0..s as f64),
                        rng.gen_range(0.0..s as f64),
                        rng.gen_range(2.5..5.0),
                    )
                })
                .collect();
            for y in 0..s {
                for x in 0..s {
                    let v: f64 = blobs
                        .iter()
                        .map(|&(bx, by, r)| {
                            let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                            (-d2 / (2.0 * r * r)).exp()
                        })
                        .sum();
                    out[y * s + x] = v.min(1.0);
                }
            }
        }
        // linear gradient
        _ => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let half = (s as f64 - 1.0) / 2.0;
            for y in 0..s {
                for x in 0..s {
                    let t = (dx * (x as f64 - half) + dy * (y as f64 - half)) / (half * 1.5);
                    out[y * s + x] = (0.5 + 0.5 * t).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

fn sample_spec(cfg: &SyntheticConfig, split: Split, index: usize) -> SampleSpec {
    let num_fine = cfg.num_fine();
    let mut rng = stream_rng(cfg.seed, Stream::Data, ((split as u64) << 40) | index as u64);
    SampleSpec {
        fine: index % num_fine,
        content_seed: rng.gen(),
        noise_seed: rng.gen(),
    }
}

fn build_split(
    cfg: &SyntheticConfig,
    split: Split,
    per_class: usize,
    domains: &[usize],
) -> Dataset {
    let motifs = motifs(cfg);
    let hierarchy = cfg.hierarchy();
    let per_domain = per_class * cfg.num_fine();
    let samples = (0..per_domain * domains.len())
        .into_par_iter()
        .map(|i| {
            let domain = domains[i / per_domain];
            let spec = sample_spec(cfg, split, i);
            SyntheticSample {
                image: render(cfg, &motifs, &hierarchy, spec, &cfg.domains[domain]),
                fine: spec.fine as u16,
                coarse: hierarchy[spec.fine] as u16,
                domain: domain as u16,
            }
        })
        .collect();
    Dataset {
        image_size: cfg.image_size,
        samples,
    }
}

/// Source train/val splits and a target-domain test split.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Splits> {
    cfg.validate()?;
    let targets: Vec<usize> = (1..cfg.domains.len()).collect();
    Ok(Splits {
        train: build_split(cfg, Split::Train, cfg.train_per_class, &[0]),
        val: build_split(cfg, Split::Val, cfg.test_per_class, &[0]),
        test: build_split(cfg, Split::Test, cfg.test_per_class, &targets),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_per_class: 5,
            test_per_class: 2,
            seed: 11,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn hierarchy_has_one_parent_per_fine_class() {
        let cfg = SyntheticConfig::default();
        assert_eq!(cfg.num_fine(), 8);
        assert_eq!(cfg.hierarchy(), vec![0, 0, 0, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn sibling_motifs_differ_in_few_cells() {
        let cfg = small();
        let m = motifs(&cfg);
        let diff = |a: usize, b: usize| (0..25).filter(|&i| m[a][i] != m[b][i]).count();
        assert_eq!(diff(0, 1), 2 * cfg.variant_cells);
        assert_eq!(diff(6, 7), 2 * cfg.variant_cells);
    }

    #[test]
    fn label_histogram_matches_config() {
        let cfg = small();
        let splits = generate_dataset(&cfg).unwrap();
        assert_eq!(splits.train.label_histogram(8), vec![5; 8]);
        assert_eq!(splits.test.label_histogram(8), vec![2; 8]);
        assert!(splits.test.samples.iter().all(|s| s.domain == 1));
        assert!(splits.val.samples.iter().all(|s| s.domain == 0));
        let h = cfg.hierarchy();
        assert!(splits
            .train
            .samples
            .iter()
            .all(|s| s.coarse as usize == h[s.fine as usize]));
        assert!(splits
            .train
            .samples
            .iter()
            .all(|s| s.image.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn identity_style_is_domain_independent() {
        let cfg = small();
        let m = motifs(&cfg);
        let h = cfg.hierarchy();
        let spec = SampleSpec {
            fine: 4,
            content_seed: 77,
            noise_seed: 78,
        };
        let a = render(&cfg, &m, &h, spec, &DomainStyle::identity());
        let b = render(&cfg, &m, &h, spec, &DomainStyle::identity());
        assert_eq!(a, b);
        let shifted = render(&cfg, &m, &h, spec, &DomainStyle::default_target());
        assert_ne!(a, shifted);
    }

    #[test]
    fn container_round_trip() {
        let cfg = small();
        let splits = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        splits.train.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back, splits.train);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"HSSH");
        assert_eq!(bytes.len(), 12 + 40 * (3 * 32 * 32 * 4 + 6));
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"NOPE\x01\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(Dataset::read(&path), Err(Error::Format { .. })));
    }
}
