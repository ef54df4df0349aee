//! Procedural bonafide/attack corpora with domain-specific capture style.
//!
//! An image is the sum of
//! * a domain style field made only of DCT basis functions inside the
//!   low-frequency band (brightness offset plus smooth illumination), and
//! * class content around an iris-like annulus: fine band-limited texture for
//!   bonafide, a periodic dot lattice for pattern attacks, and quantized
//!   texture under halftone stripes for printouts. Attack kinds also carry a
//!   mild tone change inside the annulus (pigment or paper), the kind of
//!   low-frequency cue a classifier can latch onto and that shifts between
//!   capture setups.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm;
use crate::plane::{Image, Plane};
use crate::rng::substream;
use crate::spectral::{band_extent, idct2, Spectrum, DEFAULT_LOW_FRACTION};

pub const MIN_SIZE: usize = 32;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GENERATOR_FILE: &str = "generator.json";

const EDGE_SOFTNESS: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundProfile {
    /// Standard deviation of the smooth illumination field.
    pub amplitude: f64,
    /// Fraction of the low band (per axis) the field may use, in `(0, 1]`.
    pub spatial_scale: f64,
    /// Mean brightness.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub style_seed: u64,
    pub background: BackgroundProfile,
    /// Standard deviation of white sensor noise.
    pub noise_level: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let b = &self.background;
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return Err(Error::Config(format!(
                "domain name {:?} is not a plain identifier",
                self.name
            )));
        }
        if !(b.spatial_scale > 0.0 && b.spatial_scale <= 1.0) {
            return Err(Error::Config(format!("{}: spatial_scale must be in (0, 1]", self.name)));
        }
        if !(0.0..=1.0).contains(&b.offset) || b.amplitude < 0.0 || self.noise_level < 0.0 {
            return Err(Error::Config(format!("{}: background/noise out of range", self.name)));
        }
        Ok(())
    }
}

/// Class content parameters shared by every domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContentProfile {
    pub version: u32,
    /// Iris annulus radii as fractions of the image side.
    pub pupil_radius: f64,
    pub iris_radius: f64,
    /// Max center jitter, fraction of side.
    pub center_jitter: f64,
    pub pupil_darkening: f64,
    pub iris_darkening: f64,
    /// Std of the iris texture.
    pub texture_std: f64,
    /// Texture passband as DCT radius fractions of the side.
    pub texture_band: (f64, f64),
    pub lattice_amplitude: f64,
    /// Lattice period range in pixels at size 200 (scaled with size).
    pub lattice_period: (f64, f64),
    /// Share of the natural texture kept under a patterned lens.
    pub lens_texture_keep: f64,
    /// Tone shift inside the annulus for pattern attacks.
    pub lens_tone: f64,
    pub print_levels: u32,
    pub stripe_amplitude: f64,
    pub stripe_period: f64,
    /// Tone shift of the whole printout.
    pub print_tone: f64,
}

impl Default for ContentProfile {
    fn default() -> Self {
        Self {
            version: 1,
            pupil_radius: 0.11,
            iris_radius: 0.33,
            center_jitter: 0.02,
            pupil_darkening: 0.12,
            iris_darkening: 0.06,
            texture_std: 0.05,
            texture_band: (0.12, 0.40),
            lattice_amplitude: 0.08,
            lattice_period: (5.0, 7.0),
            lens_texture_keep: 0.5,
            lens_tone: 0.06,
            print_levels: 4,
            stripe_amplitude: 0.04,
            stripe_period: 4.0,
            print_tone: 0.06,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Bonafide,
    Attack,
}

impl Class {
    pub fn label(self) -> usize {
        match self {
            Class::Bonafide => 0,
            Class::Attack => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Bonafide => "bonafide",
            Class::Attack => "attack",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Class::Bonafide),
            "attack" => Ok(Class::Attack),
            _ => Err(Error::Format(format!("unknown class {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Pattern,
    Printout,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Pattern => "pattern",
            AttackKind::Printout => "printout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSpec {
    pub class: Class,
    pub attack_kind: Option<AttackKind>,
    pub instance_seed: u64,
}

impl SampleSpec {
    pub fn bonafide(instance_seed: u64) -> Self {
        Self {
            class: Class::Bonafide,
            attack_kind: None,
            instance_seed,
        }
    }

    pub fn attack(kind: AttackKind, instance_seed: u64) -> Self {
        Self {
            class: Class::Attack,
            attack_kind: Some(kind),
            instance_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.class, self.attack_kind) {
            (Class::Bonafide, None) | (Class::Attack, Some(_)) => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "class {:?} inconsistent with attack kind {:?}",
                self.class, self.attack_kind
            ))),
        }
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Smooth field spanned by DCT bases with both indices below `extent`,
/// excluding DC, scaled to unit standard deviation.
fn low_band_field<R: Rng>(size: usize, extent: usize, rng: &mut R) -> Result<Plane> {
    let mut c = Plane::zeros(size, size);
    for u in 0..extent {
        for v in 0..extent {
            if u + v > 0 {
                c.set(u, v, normal(rng));
            }
        }
    }
    unit_std(idct2(&Spectrum::from_coeffs(c)?)?)
}

/// Isotropic band-limited noise, unit standard deviation.
fn band_noise<R: Rng>(size: usize, band: (f64, f64), rng: &mut R) -> Result<Plane> {
    let (lo, hi) = (band.0 * size as f64, band.1 * size as f64);
    let mut c = Plane::zeros(size, size);
    for u in 0..size {
        for v in 0..size {
            let r = ((u * u + v * v) as f64).sqrt();
            if r >= lo && r < hi {
                c.set(u, v, normal(rng));
            }
        }
    }
    unit_std(idct2(&Spectrum::from_coeffs(c)?)?)
}

/// Disk indicator with a smooth rim a few pixels wide.
fn soft_disk(d: f64, radius: f64) -> f64 {
    1.0 / (1.0 + ((d - radius) / EDGE_SOFTNESS).exp())
}

fn unit_std(p: Plane) -> Result<Plane> {
    let n = p.len() as f64;
    let mean = p.as_slice().iter().sum::<f64>() / n;
    let var = p.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Ok(p);
    }
    let s = var.sqrt();
    Ok(p.map(|v| v / s))
}

/// Renders one sample with the default content profile.
pub fn render(domain: &DomainSpec, sample: &SampleSpec, size: usize) -> Result<(Image, usize)> {
    render_with(domain, sample, size, &ContentProfile::default())
}

pub fn render_with(
    domain: &DomainSpec,
    sample: &SampleSpec,
    size: usize,
    content: &ContentProfile,
) -> Result<(Image, usize)> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!("size {size} below minimum {MIN_SIZE}")));
    }
    domain.validate()?;
    sample.validate()?;
    let sf = size as f64;
    let band = band_extent(size, DEFAULT_LOW_FRACTION).max(1);
    let extent = ((domain.background.spatial_scale * band as f64).ceil() as usize).clamp(1, band);

    // domain style: identical for every sample of the domain
    let mut style_rng = substream(domain.style_seed, "style");
    let field = low_band_field(size, extent, &mut style_rng)?;

    let mut rng = substream(sample.instance_seed, "instance");
    // per-capture illumination wobble, same band as the style field
    let wobble = low_band_field(size, extent, &mut rng)?;
    let jitter = content.center_jitter * sf;
    let cy = sf / 2.0 + rng.gen_range(-jitter..=jitter);
    let cx = sf / 2.0 + rng.gen_range(-jitter..=jitter);
    let r_pupil = content.pupil_radius * sf * rng.gen_range(0.9..1.1);
    let r_iris = content.iris_radius * sf * rng.gen_range(0.95..1.05);
    let texture = band_noise(size, content.texture_band, &mut rng)?;
    let period_scale = sf / 200.0;
    let lattice_period = rng.gen_range(content.lattice_period.0..=content.lattice_period.1) * period_scale;
    let lattice_phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let stripe_phase = rng.gen_range(0.0..2.0 * PI);
    let stripe_period = content.stripe_period * period_scale;
    let levels = content.print_levels.max(2) as f64;

    let bg = &domain.background;
    let mut img = Plane::zeros(size, size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            let pupil = soft_disk(d, r_pupil);
            let iris = soft_disk(d, r_iris) * (1.0 - pupil);
            let mut v = bg.offset + bg.amplitude * (field.get(r, c) + 0.25 * wobble.get(r, c));
            v -= content.pupil_darkening * pupil;
            let tex = content.texture_std * texture.get(r, c);
            let annulus = match sample.attack_kind {
                None => tex - content.iris_darkening,
                Some(AttackKind::Pattern) => {
                    let lat = (2.0 * PI * x / lattice_period + lattice_phase.0).cos()
                        * (2.0 * PI * y / lattice_period + lattice_phase.1).cos();
                    content.lens_texture_keep * tex + content.lattice_amplitude * lat - content.iris_darkening
                        + content.lens_tone
                }
                Some(AttackKind::Printout) => {
                    let step = 2.0 * content.texture_std;
                    let q = (tex / step * (levels / 2.0)).round() / (levels / 2.0) * step;
                    v += content.print_tone
                        + content.stripe_amplitude * (2.0 * PI * y / stripe_period + stripe_phase).cos();
                    q - content.iris_darkening
                }
            };
            v += iris * annulus;
            v += domain.noise_level * normal(&mut rng);
            img.set(r, c, v.clamp(0.0, 1.0));
        }
    }
    Ok((img, sample.class.label()))
}

/// One row of `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub domain: String,
    pub class: String,
    pub attack_kind: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl ManifestRow {
    /// Split encoded as the second path component (`<domain>/<split>/...`).
    pub fn split(&self) -> Result<Split> {
        match self.path.split('/').nth(1) {
            Some("train") => Ok(Split::Train),
            Some("test") => Ok(Split::Test),
            _ => Err(Error::Format(format!("no split in manifest path {}", self.path))),
        }
    }

    pub fn class(&self) -> Result<Class> {
        Class::parse(&self.class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Images per class per domain, across both splits.
    pub n_per_class: usize,
    pub train_fraction: f64,
    pub size: usize,
    pub master_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            train_fraction: 0.5,
            size: 200,
            master_seed: 2022,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 20 {
            return Err(Error::Config(format!(
                "corpus.n_per_class {} below 20",
                self.n_per_class
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("corpus.train_fraction must be in (0, 1)".into()));
        }
        if self.size < MIN_SIZE {
            return Err(Error::Config(format!("corpus.size {} below {MIN_SIZE}", self.size)));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        ((self.n_per_class as f64 * self.train_fraction).round() as usize).clamp(1, self.n_per_class - 1)
    }
}

#[derive(Serialize)]
struct GeneratorRecord<'a> {
    corpus: &'a CorpusConfig,
    content: &'a ContentProfile,
    domains: &'a [DomainSpec],
}

/// Every sample of a corpus, in manifest order.
pub fn plan_corpus(domains: &[DomainSpec], cfg: &CorpusConfig) -> Vec<(ManifestRow, SampleSpec, usize)> {
    let n_train = cfg.n_train();
    let mut rows = Vec::new();
    let mut counter: u64 = 0;
    let base = cfg.master_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for (di, d) in domains.iter().enumerate() {
        for split in [Split::Train, Split::Test] {
            let range = match split {
                Split::Train => 0..n_train,
                Split::Test => n_train..cfg.n_per_class,
            };
            for class in [Class::Bonafide, Class::Attack] {
                for k in range.clone() {
                    let seed = base.wrapping_add(counter);
                    counter += 1;
                    let (spec, kind) = match class {
                        Class::Bonafide => (SampleSpec::bonafide(seed), "none"),
                        Class::Attack => {
                            let kind = if k % 2 == 0 {
                                AttackKind::Pattern
                            } else {
                                AttackKind::Printout
                            };
                            (SampleSpec::attack(kind, seed), kind.as_str())
                        }
                    };
                    let path = format!("{}/{}/{}/{:04}.pgm", d.name, split.as_str(), class.as_str(), k);
                    rows.push((
                        ManifestRow {
                            path,
                            domain: d.name.clone(),
                            class: class.as_str().into(),
                            attack_kind: kind.into(),
                            seed,
                        },
                        spec,
                        di,
                    ));
                }
            }
        }
    }
    rows
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Renders and writes a corpus: PGM files under
/// `<out>/<domain>/<split>/<class>/NNNN.pgm`, plus `manifest.csv` and
/// `generator.json`. Refuses a non-empty `out` unless `force`.
pub fn build_corpus(
    domains: &[DomainSpec],
    cfg: &CorpusConfig,
    content: &ContentProfile,
    out: &Path,
    force: bool,
) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    if domains.is_empty() {
        return Err(Error::Config("no domains".into()));
    }
    let mut names = BTreeSet::new();
    for d in domains {
        d.validate()?;
        if !names.insert(&d.name) {
            return Err(Error::Config(format!("duplicate domain {}", d.name)));
        }
    }
    if dir_is_nonempty(out)? {
        if !force {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not empty (use force to overwrite)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let plan = plan_corpus(domains, cfg);
    plan.par_iter().try_for_each(|(row, spec, di)| -> Result<()> {
        let (img, _) = render_with(&domains[*di], spec, cfg.size, content)?;
        let path = out.join(&row.path);
        let parent = path.parent().expect("manifest paths have parents");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        pgm::write(&path, &img)
    })?;
    let rows: Vec<ManifestRow> = plan.into_iter().map(|(r, _, _)| r).collect();
    write_manifest(&out.join(MANIFEST_FILE), &rows)?;
    let record = GeneratorRecord {
        corpus: cfg,
        content,
        domains,
    };
    let json = serde_json::to_string_pretty(&record).expect("generator record serializes");
    let gpath = out.join(GENERATOR_FILE);
    fs::write(&gpath, json + "\n").map_err(|e| Error::io(&gpath, e))?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["path", "domain", "class", "attack_kind", "seed"] {
        return Err(Error::Format(format!(
            "{}: unexpected header {:?}",
            path.display(),
            header
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// A generated corpus on disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Corpus {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let rows = read_manifest(&root.join(MANIFEST_FILE))?;
        for r in &rows {
            r.split()?;
            r.class()?;
        }
        Ok(Self { root, rows })
    }

    pub fn domains(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.domain.clone()).collect()
    }

    pub fn partition(&self, domain: &str, split: Split) -> Vec<&ManifestRow> {
        self.rows
            .iter()
            .filter(|r| r.domain == domain && r.split().ok() == Some(split))
            .collect()
    }

    pub fn load(&self, row: &ManifestRow) -> Result<Image> {
        pgm::read(self.root.join(&row.path))
    }
}
