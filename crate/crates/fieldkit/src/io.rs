//! Portable file formats, run configuration, and the command-level
//! orchestration behind the CLI.
//!
//! A dataset is a JSON manifest next to raw little-endian binary
//! payloads. Arrays are stored voxel-major with the x-fastest
//! linearization; multi-component arrays (coils, echoes) store one
//! full volume per component, component-major. Complex data is
//! `c64`: interleaved 32-bit float pairs, real then imaginary.

use crate::error::{Error, Result};
use crate::init::{init_pwls, init_sweep, init_two_echo, SweepConfig};
use crate::likelihood::FieldMap;
use crate::optimizer::{
    ncg_mls, qm_baseline, FieldmapProblem, IterationLog, Preconditioner, ReferenceMaps,
    RestartPolicy, SolverConfig,
};
use crate::regularizer::{DiffOrder, DifferenceOperator, ALL_AXES};
use crate::signal_model::{
    build_gamma, forward_model, precompute_cache, ComponentSource, EchoTimes, FatModel, Mode,
    MultiEchoImages, SensitivityMaps,
};
use crate::sim;
use crate::volume::{Dims, Mask};
use crate::waterfat::{separate, ComponentImages};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Element type of a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    /// Complex: two little-endian 32-bit floats, real then imaginary.
    C64,
    F32,
    U8,
}

impl Dtype {
    pub fn bytes_per_element(&self) -> usize {
        match self {
            Dtype::C64 => 8,
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// One named payload in a container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub path: String,
    pub dtype: Dtype,
    pub components: usize,
}

/// Manifest describing a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeManifest {
    pub shape: [usize; 3],
    pub n_coils: usize,
    pub n_echoes: usize,
    pub echo_times_s: Vec<f64>,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fat_model: Option<FatModel>,
    pub arrays: BTreeMap<String, ArrayEntry>,
    /// Resolved configuration echoed for provenance.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<serde_json::Value>,
}

impl VolumeManifest {
    pub fn dims(&self) -> Dims {
        Dims::new(self.shape[0], self.shape[1], self.shape[2])
    }
}

/// A manifest bound to its directory, with typed payload access.
#[derive(Debug, Clone)]
pub struct VolumeContainer {
    pub manifest: VolumeManifest,
    dir: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl VolumeContainer {
    /// New empty container rooted at `dir` (created if needed).
    pub fn create(dir: &Path, manifest: VolumeManifest) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(VolumeContainer {
            manifest,
            dir: dir.to_path_buf(),
        })
    }

    /// Opens `dir/manifest.json` or a direct path to a manifest file.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&manifest_path)?;
        let manifest: VolumeManifest = serde_json::from_str(&text)?;
        let dir = manifest_path
            .parent()
            .ok_or_else(|| Error::Manifest("manifest has no parent directory".into()))?
            .to_path_buf();
        Ok(VolumeContainer { manifest, dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn save_manifest(&self) -> Result<PathBuf> {
        let path = self.dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    fn entry(&self, name: &str) -> Result<&ArrayEntry> {
        self.manifest
            .arrays
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("array '{name}' not in manifest")))
    }

    fn expected_len(&self, entry: &ArrayEntry) -> usize {
        self.manifest.dims().n_voxels() * entry.components
    }

    pub fn write_complex(&mut self, name: &str, components: usize, data: &[Complex64]) -> Result<()> {
        let entry = ArrayEntry {
            path: format!("{name}.bin"),
            dtype: Dtype::C64,
            components,
        };
        if data.len() != self.expected_len(&entry) {
            return Err(Error::ShapeMismatch(format!(
                "array '{name}' has {} values, expected {}",
                data.len(),
                self.expected_len(&entry)
            )));
        }
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in data {
            bytes.extend_from_slice(&(v.re as f32).to_le_bytes());
            bytes.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
        std::fs::write(self.dir.join(&entry.path), &bytes)?;
        self.manifest.arrays.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn write_real(&mut self, name: &str, components: usize, data: &[f64]) -> Result<()> {
        let entry = ArrayEntry {
            path: format!("{name}.bin"),
            dtype: Dtype::F32,
            components,
        };
        if data.len() != self.expected_len(&entry) {
            return Err(Error::ShapeMismatch(format!(
                "array '{name}' has {} values, expected {}",
                data.len(),
                self.expected_len(&entry)
            )));
        }
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(self.dir.join(&entry.path), &bytes)?;
        self.manifest.arrays.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, components: usize, data: &[u8]) -> Result<()> {
        let entry = ArrayEntry {
            path: format!("{name}.bin"),
            dtype: Dtype::U8,
            components,
        };
        if data.len() != self.expected_len(&entry) {
            return Err(Error::ShapeMismatch(format!(
                "array '{name}' has {} values, expected {}",
                data.len(),
                self.expected_len(&entry)
            )));
        }
        std::fs::write(self.dir.join(&entry.path), data)?;
        self.manifest.arrays.insert(name.to_string(), entry);
        Ok(())
    }

    fn read_payload(&self, name: &str, want: Dtype) -> Result<(Vec<u8>, usize)> {
        let entry = self.entry(name)?;
        if entry.dtype != want {
            return Err(Error::Manifest(format!(
                "array '{name}' has dtype {:?}, expected {:?}",
                entry.dtype, want
            )));
        }
        let path = self.dir.join(&entry.path);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let expect = self.expected_len(entry) * entry.dtype.bytes_per_element();
        if bytes.len() != expect {
            return Err(Error::Manifest(format!(
                "array '{name}' payload is {} bytes, expected {expect}",
                bytes.len()
            )));
        }
        Ok((bytes, self.expected_len(entry)))
    }

    pub fn read_complex(&self, name: &str) -> Result<Vec<Complex64>> {
        let (bytes, n) = self.read_payload(name, Dtype::C64)?;
        let mut out = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(8) {
            let re = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
            let im = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
            out.push(Complex64::new(re as f64, im as f64));
        }
        Ok(out)
    }

    pub fn read_real(&self, name: &str) -> Result<Vec<f64>> {
        let (bytes, n) = self.read_payload(name, Dtype::F32)?;
        let mut out = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            out.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        Ok(out)
    }

    pub fn read_bytes(&self, name: &str) -> Result<Vec<u8>> {
        Ok(self.read_payload(name, Dtype::U8)?.0)
    }

    pub fn has_array(&self, name: &str) -> bool {
        self.manifest.arrays.contains_key(name)
    }
}

/// Regularization weight, accepted either as a plain number or in the
/// power notation "2^-4"; the resolved value is a float and the
/// original spelling is kept for provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Beta {
    text: String,
    value: f64,
}

impl Beta {
    pub fn parse(s: &str) -> Result<Beta> {
        let s = s.trim();
        let value = if let Some((base, exp)) = s.split_once('^') {
            let b: f64 = base
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad beta base in '{s}'")))?;
            let e: f64 = exp
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad beta exponent in '{s}'")))?;
            b.powf(e)
        } else {
            s.parse()
                .map_err(|_| Error::Config(format!("bad beta value '{s}'")))?
        };
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Config(format!(
                "beta must be finite and nonnegative, got {value}"
            )));
        }
        Ok(Beta {
            text: s.to_string(),
            value,
        })
    }

    pub fn from_value(value: f64) -> Beta {
        Beta {
            text: format!("{value}"),
            value,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl Serialize for Beta {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Beta;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "a number or a string like \"2^-4\"")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Beta, E> {
                Beta::parse(v).map_err(E::custom)
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<Beta, E> {
                Ok(Beta::from_value(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Beta, E> {
                Ok(Beta::from_value(v as f64))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Beta, E> {
                Ok(Beta::from_value(v as f64))
            }
        }
        de.deserialize_any(V)
    }
}

/// Preconditioner selector as spelled in configs and on the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecondKind {
    None,
    Diag,
    Ic0,
    Ic,
}

impl PrecondKind {
    pub fn to_preconditioner(self, ict_scale: f64) -> Preconditioner {
        match self {
            PrecondKind::None => Preconditioner::Identity,
            PrecondKind::Diag => Preconditioner::Diag,
            PrecondKind::Ic0 => Preconditioner::Ic0,
            PrecondKind::Ic => Preconditioner::Ict { scale: ict_scale },
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PrecondKind::None),
            "diag" => Ok(PrecondKind::Diag),
            "ic0" => Ok(PrecondKind::Ic0),
            "ic" | "ict" => Ok(PrecondKind::Ic),
            _ => Err(Error::Config(format!("unknown preconditioner '{s}'"))),
        }
    }
}

/// Resolved estimation configuration; echoed verbatim into output
/// manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub beta: Beta,
    pub reg_order: u8,
    pub preconditioner: PrecondKind,
    pub ict_scale: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub sweep_grid: usize,
    pub pwls_cg_iters: usize,
    pub seed: u64,
    pub threads: usize,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Fieldmap,
            beta: Beta::parse("2^-4").expect("static default"),
            reg_order: 1,
            preconditioner: PrecondKind::Ic,
            ict_scale: 1e-3,
            outer_iters: 30,
            inner_iters: 10,
            sweep_grid: 100,
            pwls_cg_iters: 10,
            seed: 0,
            threads: 0,
            output_dir: String::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reg_order != 1 && self.reg_order != 2 {
            return Err(Error::Config(format!(
                "regularizer order must be 1 or 2, got {}",
                self.reg_order
            )));
        }
        if self.ict_scale < 0.0 || !self.ict_scale.is_finite() {
            return Err(Error::Config("ict scale must be finite and >= 0".into()));
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if self.sweep_grid < 2 {
            return Err(Error::Config("sweep grid needs >= 2 points".into()));
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            preconditioner: self.preconditioner.to_preconditioner(self.ict_scale),
            outer_iters: self.outer_iters,
            inner_iters: self.inner_iters,
            grad_tol: None,
            restart: RestartPolicy::DescentReset,
        }
    }

    pub fn diff_order(&self) -> DiffOrder {
        if self.reg_order == 1 {
            DiffOrder::First
        } else {
            DiffOrder::Second
        }
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt_float(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Renders an iteration log as CSV with 17-significant-digit floats.
pub fn log_csv_string(log: &IterationLog) -> String {
    let mut out = String::from("iter,time_s,cost,grad_norm,rmse_hz,rmsd_hz,factor_nnz\n");
    for r in &log.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iter,
            fmt_float(r.time_s),
            fmt_float(r.psi),
            fmt_float(r.grad_norm),
            fmt_opt_float(r.rmse_hz),
            fmt_opt_float(r.rmsd_hz),
            r.factor_nnz.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    out
}

pub fn write_log_csv(path: &Path, log: &IterationLog) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(log_csv_string(log).as_bytes())?;
    Ok(())
}

/// Options for dataset simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub mode: Mode,
    pub dims: [usize; 3],
    pub n_coils: usize,
    pub echo_times_s: Vec<f64>,
    /// Noise level in dB; `None` means noiseless.
    pub snr_db: Option<f64>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fat_model: Option<FatModel>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            mode: Mode::Fieldmap,
            dims: [64, 64, 40],
            n_coils: 4,
            echo_times_s: vec![0.0, 0.002, 0.010],
            snr_db: Some(20.0),
            seed: 0,
            fat_model: None,
        }
    }
}

/// Generates a synthetic dataset and writes it as a container under
/// `out_dir`. Returns the manifest path.
pub fn cmd_simulate(cfg: &SimulateConfig, out_dir: &Path) -> Result<PathBuf> {
    let dims = Dims::new(cfg.dims[0], cfg.dims[1], cfg.dims[2]);
    let times = EchoTimes::new(cfg.echo_times_s.clone())?;
    let two_pi = 2.0 * std::f64::consts::PI;
    let sens = sim::sim_coil_maps(dims, cfg.n_coils);

    let (y, phantom, fat_model) = match cfg.mode {
        Mode::Fieldmap => {
            if cfg.fat_model.is_some() {
                return Err(Error::Config(
                    "fat model is only meaningful in water-fat mode".into(),
                ));
            }
            let basis = build_gamma(Mode::Fieldmap, &times, None)?;
            let phantom = sim::brain_phantom(dims);
            let m: Vec<Complex64> = phantom
                .magnitude
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            let omega: Vec<f64> = phantom.field_hz.iter().map(|f| two_pi * f).collect();
            let y = forward_model(&ComponentSource::Magnetization(&m), &omega, &sens, &times, &basis)?;
            (y, phantom, None)
        }
        Mode::Waterfat => {
            let fat_model = cfg
                .fat_model
                .clone()
                .unwrap_or_else(|| FatModel::single_peak(-440.0));
            let basis = build_gamma(Mode::Waterfat, &times, Some(&fat_model))?;
            let phantom = sim::waterfat_phantom(dims);
            let omega: Vec<f64> = phantom.field_hz.iter().map(|f| two_pi * f).collect();
            let y = forward_model(
                &ComponentSource::WaterFat {
                    water: phantom.water.as_ref().expect("water-fat phantom"),
                    fat: phantom.fat.as_ref().expect("water-fat phantom"),
                },
                &omega,
                &sens,
                &times,
                &basis,
            )?;
            (y, phantom, Some(fat_model))
        }
    };
    let y = sim::add_noise_snr(&y, cfg.snr_db.unwrap_or(f64::INFINITY), cfg.seed);

    let manifest = VolumeManifest {
        shape: cfg.dims,
        n_coils: cfg.n_coils,
        n_echoes: times.len(),
        echo_times_s: cfg.echo_times_s.clone(),
        mode: cfg.mode,
        fat_model,
        arrays: BTreeMap::new(),
        config: Some(serde_json::to_value(cfg)?),
    };
    let mut container = VolumeContainer::create(out_dir, manifest)?;
    container.write_complex("y", cfg.n_coils * times.len(), y.data())?;
    container.write_complex("sens", cfg.n_coils, sens.data())?;
    container.write_real("fieldmap_true_hz", 1, &phantom.field_hz)?;
    if let (Some(w), Some(f)) = (&phantom.water, &phantom.fat) {
        container.write_complex("water_true", 1, w)?;
        container.write_complex("fat_true", 1, f)?;
    }
    container.save_manifest()
}

/// Everything loaded from an input container that estimation needs.
pub struct LoadedDataset {
    pub dims: Dims,
    pub y: MultiEchoImages,
    pub sens: SensitivityMaps,
    pub times: EchoTimes,
    pub mode: Mode,
    pub fat_model: Option<FatModel>,
    pub truth_hz: Option<Vec<f64>>,
    pub water_true: Option<Vec<Complex64>>,
    pub fat_true: Option<Vec<Complex64>>,
}

pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let container = VolumeContainer::open(manifest_path)?;
    let m = &container.manifest;
    let dims = m.dims();
    let y = MultiEchoImages::new(dims, m.n_coils, m.n_echoes, container.read_complex("y")?)?;
    let sens = SensitivityMaps::new(dims, m.n_coils, container.read_complex("sens")?)?;
    let times = EchoTimes::new(m.echo_times_s.clone())?;
    let truth_hz = if container.has_array("fieldmap_true_hz") {
        Some(container.read_real("fieldmap_true_hz")?)
    } else {
        None
    };
    let water_true = if container.has_array("water_true") {
        Some(container.read_complex("water_true")?)
    } else {
        None
    };
    let fat_true = if container.has_array("fat_true") {
        Some(container.read_complex("fat_true")?)
    } else {
        None
    };
    Ok(LoadedDataset {
        dims,
        y,
        sens,
        times,
        mode: m.mode,
        fat_model: m.fat_model.clone(),
        truth_hz,
        water_true,
        fat_true,
    })
}

/// Result of an estimation run.
pub struct EstimateOutput {
    pub field: FieldMap,
    pub mask: Arc<Mask>,
    pub log: IterationLog,
    pub components: Option<ComponentImages>,
    pub manifest_path: PathBuf,
}

/// Full estimation pipeline: mask, initialization, solve, and (in
/// water-fat mode) component recovery, with results written as a
/// container plus a CSV convergence log.
pub fn cmd_estimate(input: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<EstimateOutput> {
    cfg.validate()?;
    let data = load_dataset(input)?;
    if data.mode != cfg.mode {
        return Err(Error::Config(format!(
            "config mode {:?} does not match dataset mode {:?}",
            cfg.mode, data.mode
        )));
    }
    let mask = Arc::new(sim::make_mask(&data.y, &data.sens, 0.1, 2)?);
    let basis = match cfg.mode {
        Mode::Fieldmap => build_gamma(Mode::Fieldmap, &data.times, None)?,
        Mode::Waterfat => {
            let fat = data.fat_model.as_ref().ok_or_else(|| {
                Error::Config("water-fat estimation needs a fat model in the manifest".into())
            })?;
            build_gamma(Mode::Waterfat, &data.times, Some(fat))?
        }
    };
    let cache = precompute_cache(&data.y, &data.sens, &basis, &data.times, &mask)?;
    let reg = DifferenceOperator::new(&mask, cfg.diff_order(), &ALL_AXES);
    let beta = cfg.beta.value();

    let omega0 = match cfg.mode {
        Mode::Fieldmap => init_two_echo(&data.y, &data.sens, &data.times, &mask)?,
        Mode::Waterfat => {
            let sweep_cfg = SweepConfig {
                grid_size: cfg.sweep_grid,
                range_hz: None,
                cg_iters: cfg.pwls_cg_iters,
            };
            let rough = init_sweep(&cache, &sweep_cfg)?;
            let rho = cache.pwls_weights();
            init_pwls(&rough, &rho, &reg, beta, cfg.pwls_cg_iters)?
        }
    };

    let prob = FieldmapProblem {
        cache: &cache,
        reg: &reg,
        beta,
    };
    let refs = ReferenceMaps {
        truth_hz: data.truth_hz.as_deref(),
        converged_hz: None,
    };
    let (field, log) = ncg_mls(&prob, &omega0, &cfg.solver_config(), &refs)?;

    let components = match cfg.mode {
        Mode::Fieldmap => None,
        Mode::Waterfat => Some(separate(&data.y, &data.sens, &basis, &data.times, &field)?),
    };

    let manifest = VolumeManifest {
        shape: [data.dims.nx, data.dims.ny, data.dims.nz],
        n_coils: data.y.n_coils(),
        n_echoes: data.y.n_echoes(),
        echo_times_s: data.times.times().to_vec(),
        mode: cfg.mode,
        fat_model: data.fat_model.clone(),
        arrays: BTreeMap::new(),
        config: Some(serde_json::to_value(cfg)?),
    };
    let mut out = VolumeContainer::create(out_dir, manifest)?;
    out.write_real("fieldmap_hz", 1, &field.to_hz())?;
    let mask_bytes: Vec<u8> = mask.flags().iter().map(|&b| b as u8).collect();
    out.write_bytes("mask", 1, &mask_bytes)?;
    if let Some(c) = &components {
        out.write_complex("water", 1, &c.water)?;
        out.write_complex("fat", 1, &c.fat)?;
        let flag_bytes: Vec<u8> = c.flagged.iter().map(|&b| b as u8).collect();
        out.write_bytes("component_flags", 1, &flag_bytes)?;
    }
    write_log_csv(&out.dir().join("log.csv"), &log)?;
    let manifest_path = out.save_manifest()?;

    Ok(EstimateOutput {
        field,
        mask,
        log,
        components,
        manifest_path,
    })
}

/// Benchmark method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    Qm,
    Ncg,
    NcgD,
    NcgIc,
}

impl BenchMethod {
    pub fn label(&self) -> &'static str {
        match self {
            BenchMethod::Qm => "qm",
            BenchMethod::Ncg => "ncg",
            BenchMethod::NcgD => "ncg-d",
            BenchMethod::NcgIc => "ncg-ic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "qm" => Ok(BenchMethod::Qm),
            "ncg" => Ok(BenchMethod::Ncg),
            "ncg-d" => Ok(BenchMethod::NcgD),
            "ncg-ic" => Ok(BenchMethod::NcgIc),
            _ => Err(Error::Config(format!("unknown bench method '{s}'"))),
        }
    }
}

/// Benchmark options: per-method iteration budgets plus the RMSD
/// threshold and the long-run reference budget.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub methods: Vec<BenchMethod>,
    pub rmsd_tol_hz: f64,
    pub ref_iters: usize,
    pub qm_iters: usize,
    pub ncg_iters: usize,
    pub ncgd_iters: usize,
    pub ic_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: vec![
                BenchMethod::Qm,
                BenchMethod::Ncg,
                BenchMethod::NcgD,
                BenchMethod::NcgIc,
            ],
            rmsd_tol_hz: 0.5,
            ref_iters: 60,
            qm_iters: 800,
            ncg_iters: 200,
            ncgd_iters: 150,
            ic_iters: 30,
        }
    }
}

/// One line of the benchmark summary.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: String,
    pub iters_to_tol: Option<usize>,
    pub time_to_tol_s: Option<f64>,
    pub final_psi: f64,
    pub final_rmsd_hz: Option<f64>,
    pub speedup_vs_ic: Option<f64>,
}

pub fn bench_csv_string(rows: &[BenchRow]) -> String {
    let mut out =
        String::from("method,iters_to_tol,time_to_tol_s,final_psi,final_rmsd_hz,speedup_vs_ic\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            r.iters_to_tol.map(|v| v.to_string()).unwrap_or_default(),
            fmt_opt_float(r.time_to_tol_s),
            fmt_float(r.final_psi),
            fmt_opt_float(r.final_rmsd_hz),
            fmt_opt_float(r.speedup_vs_ic),
        ));
    }
    out
}

/// Runs the requested methods from an identical initializer against a
/// long-run reference, recording wall time to the RMSD threshold and
/// speedups relative to the incomplete-Cholesky run. Per-method logs
/// and the summary CSV land in `out_dir`.
pub fn cmd_bench(
    input: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
    bench: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let data = load_dataset(input)?;
    if data.mode != cfg.mode {
        return Err(Error::Config(format!(
            "config mode {:?} does not match dataset mode {:?}",
            cfg.mode, data.mode
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mask = Arc::new(sim::make_mask(&data.y, &data.sens, 0.1, 2)?);
    let basis = match cfg.mode {
        Mode::Fieldmap => build_gamma(Mode::Fieldmap, &data.times, None)?,
        Mode::Waterfat => {
            let fat = data.fat_model.as_ref().ok_or_else(|| {
                Error::Config("water-fat estimation needs a fat model in the manifest".into())
            })?;
            build_gamma(Mode::Waterfat, &data.times, Some(fat))?
        }
    };
    let cache = precompute_cache(&data.y, &data.sens, &basis, &data.times, &mask)?;
    let reg = DifferenceOperator::new(&mask, cfg.diff_order(), &ALL_AXES);
    let beta = cfg.beta.value();
    let omega0 = match cfg.mode {
        Mode::Fieldmap => init_two_echo(&data.y, &data.sens, &data.times, &mask)?,
        Mode::Waterfat => {
            let sweep_cfg = SweepConfig {
                grid_size: cfg.sweep_grid,
                range_hz: None,
                cg_iters: cfg.pwls_cg_iters,
            };
            let rough = init_sweep(&cache, &sweep_cfg)?;
            let rho = cache.pwls_weights();
            init_pwls(&rough, &rho, &reg, beta, cfg.pwls_cg_iters)?
        }
    };
    let prob = FieldmapProblem {
        cache: &cache,
        reg: &reg,
        beta,
    };

    // Long-run reference with the threshold incomplete Cholesky.
    let ref_cfg = SolverConfig {
        preconditioner: Preconditioner::Ict {
            scale: cfg.ict_scale,
        },
        outer_iters: bench.ref_iters,
        inner_iters: cfg.inner_iters,
        grad_tol: None,
        restart: RestartPolicy::DescentReset,
    };
    let (reference, _) = ncg_mls(&prob, &omega0, &ref_cfg, &ReferenceMaps::default())?;
    let reference_hz = reference.to_hz();

    let refs = ReferenceMaps {
        truth_hz: data.truth_hz.as_deref(),
        converged_hz: Some(&reference_hz),
    };

    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for method in &bench.methods {
        let (log, iters) = match method {
            BenchMethod::Qm => {
                let mcfg = SolverConfig {
                    outer_iters: bench.qm_iters,
                    inner_iters: cfg.inner_iters,
                    ..ref_cfg.clone()
                };
                let (_, log) = qm_baseline(&prob, &omega0, &mcfg, &refs)?;
                (log, bench.qm_iters)
            }
            BenchMethod::Ncg | BenchMethod::NcgD | BenchMethod::NcgIc => {
                let (pre, iters) = match method {
                    BenchMethod::Ncg => (Preconditioner::Identity, bench.ncg_iters),
                    BenchMethod::NcgD => (Preconditioner::Diag, bench.ncgd_iters),
                    _ => (
                        Preconditioner::Ict {
                            scale: cfg.ict_scale,
                        },
                        bench.ic_iters,
                    ),
                };
                let mcfg = SolverConfig {
                    preconditioner: pre,
                    outer_iters: iters,
                    inner_iters: cfg.inner_iters,
                    grad_tol: None,
                    restart: RestartPolicy::DescentReset,
                };
                let (_, log) = ncg_mls(&prob, &omega0, &mcfg, &refs)?;
                (log, iters)
            }
        };
        let _ = iters;
        rows.push(BenchRow {
            method: method.label().to_string(),
            iters_to_tol: log.first_below_rmsd(bench.rmsd_tol_hz),
            time_to_tol_s: log.time_below_rmsd(bench.rmsd_tol_hz),
            final_psi: log.final_psi(),
            final_rmsd_hz: log.rows.last().and_then(|r| r.rmsd_hz),
            speedup_vs_ic: None,
        });
        write_log_csv(&out_dir.join(format!("log_{}.csv", method.label())), &log)?;
        logs.push(log);
    }

    let ic_time = rows
        .iter()
        .find(|r| r.method == "ncg-ic")
        .and_then(|r| r.time_to_tol_s);
    if let Some(t_ic) = ic_time {
        for r in &mut rows {
            r.speedup_vs_ic = r.time_to_tol_s.map(|t| t / t_ic);
        }
    }

    let mut f = std::fs::File::create(out_dir.join("bench.csv"))?;
    f.write_all(bench_csv_string(&rows).as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn beta_accepts_power_notation_and_numbers() {
        assert_eq!(Beta::parse("2^-4").unwrap().value(), 0.0625);
        assert_eq!(Beta::parse("2^3").unwrap().value(), 8.0);
        assert_eq!(Beta::parse("0.125").unwrap().value(), 0.125);
        assert!(Beta::parse("abc").is_err());
        assert!(Beta::parse("-1").is_err());
        // Round-trips through JSON preserving spelling.
        let b = Beta::parse("2^-7").unwrap();
        let json = serde_json::to_string(&b).unwrap();
        assert_eq!(json, "\"2^-7\"");
        let back: Beta = serde_json::from_str(&json).unwrap();
        assert_eq!(back.value(), 2f64.powi(-7));
        let num: Beta = serde_json::from_str("0.5").unwrap();
        assert_eq!(num.value(), 0.5);
    }

    #[test]
    fn container_round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let manifest = VolumeManifest {
            shape: [2, 2, 1],
            n_coils: 1,
            n_echoes: 2,
            echo_times_s: vec![0.0, 0.002],
            mode: Mode::Fieldmap,
            fat_model: None,
            arrays: BTreeMap::new(),
            config: None,
        };
        let mut c = VolumeContainer::create(dir.path(), manifest).unwrap();
        let data: Vec<Complex64> = (0..8)
            .map(|i| Complex64::new(i as f64 * 0.25, -(i as f64) * 0.5))
            .collect();
        c.write_complex("y", 2, &data).unwrap();
        let reals = vec![1.5, -2.25, 3.0, 0.125];
        c.write_real("truth", 1, &reals).unwrap();
        c.write_bytes("mask", 1, &[1, 0, 1, 1]).unwrap();
        let path = c.save_manifest().unwrap();

        let opened = VolumeContainer::open(&path).unwrap();
        assert_eq!(opened.read_complex("y").unwrap(), data);
        assert_eq!(opened.read_real("truth").unwrap(), reals);
        assert_eq!(opened.read_bytes("mask").unwrap(), vec![1, 0, 1, 1]);

        // Writing the same content again produces identical bytes.
        let y_bytes = std::fs::read(dir.path().join("y.bin")).unwrap();
        let mut c2 = VolumeContainer::open(&path).unwrap();
        c2.write_complex("y", 2, &data).unwrap();
        assert_eq!(std::fs::read(dir.path().join("y.bin")).unwrap(), y_bytes);
    }

    #[test]
    fn payload_length_is_validated() {
        let dir = tempdir().unwrap();
        let manifest = VolumeManifest {
            shape: [2, 1, 1],
            n_coils: 1,
            n_echoes: 2,
            echo_times_s: vec![0.0, 0.002],
            mode: Mode::Fieldmap,
            fat_model: None,
            arrays: BTreeMap::new(),
            config: None,
        };
        let mut c = VolumeContainer::create(dir.path(), manifest).unwrap();
        c.write_real("truth", 1, &[1.0, 2.0]).unwrap();
        c.save_manifest().unwrap();
        // Corrupt the payload length.
        std::fs::write(dir.path().join("truth.bin"), [0u8; 5]).unwrap();
        let opened = VolumeContainer::open(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(opened.read_real("truth").is_err());
        assert!(opened.read_real("missing").is_err());
    }

    #[test]
    fn simulate_estimate_round_trip_recovers_field() {
        let dir = tempdir().unwrap();
        let sim_cfg = SimulateConfig {
            dims: [32, 32, 16],
            n_coils: 2,
            snr_db: None,
            ..Default::default()
        };
        let manifest = cmd_simulate(&sim_cfg, &dir.path().join("sim")).unwrap();
        let run = RunConfig {
            outer_iters: 20,
            output_dir: dir.path().join("est").to_string_lossy().into_owned(),
            ..Default::default()
        };
        let out = cmd_estimate(&manifest, &dir.path().join("est"), &run).unwrap();
        // Noiseless data: the estimate should sit on the truth.
        let rmse = out.log.rows.last().unwrap().rmse_hz.unwrap();
        assert!(rmse < 0.01, "round-trip rmse {rmse}");
        assert!(out.log.is_monotone(1e-12));
        // Output container re-opens with the config echoed.
        let reopened = VolumeContainer::open(&out.manifest_path).unwrap();
        assert!(reopened.manifest.config.is_some());
        assert!(reopened.has_array("fieldmap_hz"));
        assert!(reopened.has_array("mask"));
    }

    #[test]
    fn same_seed_reproduces_volumes_and_log_columns() {
        let dir = tempdir().unwrap();
        let sim_cfg = SimulateConfig {
            dims: [12, 12, 6],
            n_coils: 2,
            snr_db: Some(20.0),
            seed: 42,
            ..Default::default()
        };
        let m1 = cmd_simulate(&sim_cfg, &dir.path().join("a")).unwrap();
        let m2 = cmd_simulate(&sim_cfg, &dir.path().join("b")).unwrap();
        let ya = std::fs::read(dir.path().join("a/y.bin")).unwrap();
        let yb = std::fs::read(dir.path().join("b/y.bin")).unwrap();
        assert_eq!(ya, yb, "same-seed volumes differ");
        let ma = std::fs::read_to_string(&m1).unwrap();
        let mb = std::fs::read_to_string(&m2).unwrap();
        assert_eq!(ma, mb, "same-seed manifests differ");

        let run = RunConfig {
            outer_iters: 5,
            ..Default::default()
        };
        let e1 = cmd_estimate(&m1, &dir.path().join("ea"), &run).unwrap();
        let e2 = cmd_estimate(&m2, &dir.path().join("eb"), &run).unwrap();
        let fa = std::fs::read(dir.path().join("ea/fieldmap_hz.bin")).unwrap();
        let fb = std::fs::read(dir.path().join("eb/fieldmap_hz.bin")).unwrap();
        assert_eq!(fa, fb, "same-config field maps differ");
        // CSV rows identical except the wall-time column.
        let strip_time = |log: &IterationLog| -> Vec<String> {
            log_csv_string(log)
                .lines()
                .map(|l| {
                    let mut cols: Vec<&str> = l.split(',').collect();
                    if cols.len() > 1 {
                        cols.remove(1);
                    }
                    cols.join(",")
                })
                .collect()
        };
        assert_eq!(strip_time(&e1.log), strip_time(&e2.log));
    }

    #[test]
    fn csv_uses_17_significant_digits() {
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
    }
}
