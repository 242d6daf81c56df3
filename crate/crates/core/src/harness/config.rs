//! Study configuration: JSON schema, defaults and validation.

use std::fmt;
use std::path::Path;

use num_integer::Integer;
use num_traits::{ToPrimitive, Zero};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::geometry::{build_reference_cell, rational_from_f64, to_f64, ChannelProfile, Segment, Q};
use crate::grid::build_cell_grid;
use crate::kinetics::{InitialData, InitialProfile, Kinetics, KineticsSpec};
use crate::linsolve::SolverOptions;
use crate::macrosim::MacroSettings;
use crate::microsim::{stability_bound, DiffusionSpec};
use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// An exact rational read from a JSON number or a `"p/q"` string.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rational(pub Q);

impl Rational {
    pub fn new(n: i64, d: i64) -> Self {
        Rational(Q::new(n, d))
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

fn parse_rational(text: &str) -> Option<Q> {
    let text = text.trim();
    match text.split_once('/') {
        Some((n, d)) => {
            let n: i64 = n.trim().parse().ok()?;
            let d: i64 = d.trim().parse().ok()?;
            (d != 0).then(|| Q::new(n, d))
        }
        None => match text.parse::<i64>() {
            Ok(n) => Some(Q::from_integer(n)),
            Err(_) => rational_from_f64(text.parse().ok()?),
        },
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Rational;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a \"p/q\" string")
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Rational, E> {
                Ok(Rational(Q::from_integer(v)))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Rational, E> {
                i64::try_from(v)
                    .map(|v| Rational(Q::from_integer(v)))
                    .map_err(|_| E::custom("integer out of range"))
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Rational, E> {
                rational_from_f64(v)
                    .map(Rational)
                    .ok_or_else(|| E::custom(format!("{v} is not an exact rational")))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Rational, E> {
                parse_rational(v)
                    .map(Rational)
                    .ok_or_else(|| E::custom(format!("\"{v}\" is not a rational")))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub lower: Rational,
    pub upper: Rational,
    pub width: Rational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub height: Rational,
    pub profile: Vec<SegmentConfig>,
    /// Checked against the profile when given; echoed either way.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusivityConfig {
    pub plus: Option<f64>,
    pub minus: Option<f64>,
    /// Diagonal `D^M` per profile segment; a single entry applies to all.
    pub channel: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticsConfig {
    #[serde(default = "KineticsSpec::zero")]
    pub f_plus: KineticsSpec,
    #[serde(default = "KineticsSpec::zero")]
    pub f_minus: KineticsSpec,
    #[serde(default = "KineticsSpec::zero")]
    pub g: KineticsSpec,
    #[serde(default = "KineticsSpec::zero")]
    pub h: KineticsSpec,
}

impl Default for KineticsConfig {
    fn default() -> Self {
        Self {
            f_plus: KineticsSpec::zero(),
            f_minus: KineticsSpec::zero(),
            g: KineticsSpec::zero(),
            h: KineticsSpec::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeStepRule {
    /// `Δt = factor · ε_min`
    Scaled { factor: f64 },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RefinementConfig {
    /// Micro layer refinement `k`.
    pub micro: Option<usize>,
    /// Cell grid refinement `m`.
    pub cell: Option<usize>,
    /// Macro interface nodes `J`.
    pub interface_nodes: Option<usize>,
    pub first_spacing: Option<f64>,
    pub grading: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Horizontal shift in ε-cells.
    pub l: Option<usize>,
    pub margin: Option<Rational>,
}

/// The config file as written; [`StudyConfig::echo`] is this with every
/// default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub geometry: GeometryConfig,
    pub diffusivity: DiffusivityConfig,
    #[serde(default)]
    pub kinetics: KineticsConfig,
    pub initial: InitialData,
    pub final_time: f64,
    #[serde(default)]
    pub time_step: Option<TimeStepRule>,
    pub epsilon: Vec<Rational>,
    #[serde(default)]
    pub refinement: RefinementConfig,
    #[serde(default)]
    pub snapshot_stride: Option<usize>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// A validated study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub echo: ConfigFile,
    pub profile: ChannelProfile,
    pub height: Q,
    pub diff: DiffusionSpec,
    pub kin: Kinetics,
    pub init: InitialData,
    pub final_time: f64,
    pub dt: f64,
    pub eps: Vec<Q>,
    pub k: usize,
    pub m: usize,
    pub nodes: usize,
    pub first_spacing: f64,
    pub grading: f64,
    pub stride: usize,
    pub solver: SolverOptions,
    pub shift_l: usize,
    pub shift_margin: Q,
    pub output: String,
    pub seed: u64,
}

fn invalid(path: &str, msg: impl fmt::Display) -> Error {
    Error::Validation(format!("{path}: {msg}"))
}

fn positive(path: &str, v: f64) -> Result<f64, Error> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(path, format!("must be positive and finite (got {v})")))
    }
}

/// Parses and validates config text.
pub fn parse_config(text: &str) -> Result<StudyConfig, Error> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Validation(format!("{path}: {}", e.into_inner()))
    })?;
    validate(file)
}

pub fn load_config(path: &Path) -> Result<StudyConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Fills defaults and checks every invariant of a parsed config.
pub fn validate(mut file: ConfigFile) -> Result<StudyConfig, Error> {
    if file.schema_version != SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("unsupported version {} (expected {SCHEMA_VERSION})", file.schema_version),
        ));
    }

    let height = file.geometry.height.0;
    if height <= Q::zero() {
        return Err(invalid("geometry.height", "must be positive"));
    }
    let segments = file
        .geometry
        .profile
        .iter()
        .map(|s| Segment::new(s.lower.0, s.upper.0, s.width.0))
        .collect();
    let profile = ChannelProfile::new(segments).map_err(|e| invalid("geometry.profile", e))?;
    let cell = build_reference_cell(&profile).map_err(|e| invalid("geometry.profile", e))?;
    let alignment = profile.alignment();
    if let Some(a) = file.geometry.alignment {
        if a != alignment {
            return Err(invalid(
                "geometry.alignment",
                format!("profile breakpoints need alignment {alignment}, config says {a}"),
            ));
        }
    }
    file.geometry.alignment = Some(alignment);

    let d = &mut file.diffusivity;
    let plus = positive("diffusivity.plus", d.plus.ok_or_else(|| Error::Validation("diffusivity.plus required".into()))?)?;
    let minus = positive(
        "diffusivity.minus",
        d.minus.ok_or_else(|| Error::Validation("diffusivity.minus required".into()))?,
    )?;
    let mut channel = d
        .channel
        .clone()
        .ok_or_else(|| Error::Validation("diffusivity.channel required".into()))?;
    let nseg = profile.segments().len();
    if channel.len() == 1 && nseg > 1 {
        channel = vec![channel[0]; nseg];
    }
    if channel.len() != nseg {
        return Err(invalid(
            "diffusivity.channel",
            format!("needs one entry per profile segment ({nseg}), got {}", channel.len()),
        ));
    }
    for (i, e) in channel.iter().enumerate() {
        for (a, v) in e.iter().enumerate() {
            positive(&format!("diffusivity.channel[{i}][{a}]"), *v)?;
        }
    }
    d.channel = Some(channel.clone());
    let diff = DiffusionSpec {
        plus,
        minus,
        channel,
    };
    diff.validate(&cell).map_err(|e| invalid("diffusivity", e))?;

    let kin = Kinetics {
        f_plus: file.kinetics.f_plus.clone(),
        f_minus: file.kinetics.f_minus.clone(),
        g: file.kinetics.g.clone(),
        h: file.kinetics.h.clone(),
    };
    kin.certify(10.0, to_f64(height)).map_err(|e| invalid("kinetics", e))?;

    file.initial.validate().map_err(|e| invalid("initial", e))?;
    let init = file.initial.clone();
    check_initial(&init)?;

    if !(file.final_time.is_finite() && file.final_time >= 0.0) {
        return Err(invalid("final_time", "must be finite and non-negative"));
    }

    if file.epsilon.is_empty() {
        return Err(invalid("epsilon", "at least one ε is required"));
    }
    let mut eps = Vec::with_capacity(file.epsilon.len());
    for (i, e) in file.epsilon.iter().enumerate() {
        let q = e.0;
        let path = format!("epsilon[{i}]");
        if q <= Q::zero() || !q.recip().is_integer() {
            return Err(invalid(&path, format!("ε⁻¹ must be a positive integer (got ε = {q})")));
        }
        if q >= height {
            return Err(invalid(&path, format!("ε = {q} must be below H = {height}")));
        }
        if let Some(prev) = eps.last() {
            if q >= *prev {
                return Err(invalid(&path, "ε list must be strictly decreasing"));
            }
        }
        eps.push(q);
    }
    let eps_min = to_f64(*eps.last().unwrap());

    let rule = file
        .time_step
        .clone()
        .unwrap_or(TimeStepRule::Scaled { factor: 0.125 });
    let dt = match &rule {
        TimeStepRule::Scaled { factor } => positive("time_step.factor", *factor)? * eps_min,
        TimeStepRule::Fixed { value } => positive("time_step.value", *value)?,
    };
    file.time_step = Some(rule);

    let r = &mut file.refinement;
    let k = r.micro.unwrap_or(4);
    let m = r.cell.unwrap_or(k);
    if k == 0 {
        return Err(invalid("refinement.micro", "must be positive"));
    }
    if m == 0 {
        return Err(invalid("refinement.cell", "must be positive"));
    }
    for (path, n) in [("refinement.micro", k), ("refinement.cell", m)] {
        build_cell_grid(&cell, n).map_err(|e| invalid(path, e))?;
    }
    if k != m {
        return Err(invalid(
            "refinement",
            format!("alignment requires micro refinement k = {k} to equal cell refinement m = {m}"),
        ));
    }
    let columns_lcm = eps
        .iter()
        .fold(1usize, |a, q| a.lcm(&q.recip().to_integer().to_usize().unwrap_or(1)));
    let nodes = r.interface_nodes.unwrap_or(columns_lcm);
    if nodes == 0 || nodes % columns_lcm != 0 {
        return Err(invalid(
            "refinement.interface_nodes",
            format!("must be a positive multiple of every ε⁻¹ (lcm {columns_lcm}), got {nodes}"),
        ));
    }
    let first_spacing = positive("refinement.first_spacing", r.first_spacing.unwrap_or(1.0 / nodes as f64))?;
    let grading = r.grading.unwrap_or(crate::grid::BULK_GRADING);
    if !(grading.is_finite() && grading >= 1.0) {
        return Err(invalid("refinement.grading", "must be at least 1"));
    }
    r.micro = Some(k);
    r.cell = Some(m);
    r.interface_nodes = Some(nodes);
    r.first_spacing = Some(first_spacing);
    r.grading = Some(grading);

    let bound = stability_bound(&kin, &cell, to_f64(height), k);
    if dt > bound {
        return Err(invalid(
            "time_step",
            format!("Δt = {dt} exceeds the stability bound {bound} for k = {k}"),
        ));
    }

    let stride = file.snapshot_stride.unwrap_or(1);
    if stride == 0 {
        return Err(invalid("snapshot_stride", "must be positive"));
    }
    file.snapshot_stride = Some(stride);

    let tol = file.solver.tol.unwrap_or(SolverOptions::default().tol);
    positive("solver.tol", tol)?;
    file.solver.tol = Some(tol);
    let solver = SolverOptions {
        tol,
        max_iter: file.solver.max_iter,
    };

    let shift_l = file.shift.l.unwrap_or(1);
    if shift_l == 0 {
        return Err(invalid("shift.l", "must be positive"));
    }
    let shift_margin = file.shift.margin.map_or(Q::new(1, 8), |r| r.0);
    if shift_margin <= Q::zero() || shift_margin >= Q::new(1, 4) {
        return Err(invalid("shift.margin", "must lie in (0, 1/4) so that Σ_2h is nonempty"));
    }
    file.shift.l = Some(shift_l);
    file.shift.margin = Some(Rational(shift_margin));

    let output = file.output.clone().unwrap_or_else(|| "out".into());
    file.output = Some(output.clone());
    let seed = file.seed.unwrap_or(0);
    file.seed = Some(seed);

    let final_time = file.final_time;
    Ok(StudyConfig {
        echo: file,
        profile,
        height,
        diff,
        kin,
        init,
        final_time,
        dt,
        eps,
        k,
        m,
        nodes,
        first_spacing,
        grading,
        stride,
        solver,
        shift_l,
        shift_margin,
        output,
        seed,
    })
}

fn check_initial(init: &InitialData) -> Result<(), Error> {
    for (path, p) in [
        ("initial.plus", &init.plus),
        ("initial.minus", &init.minus),
        ("initial.channel", &init.channel),
    ] {
        let finite = match p {
            InitialProfile::Constant { value } => value.is_finite(),
            InitialProfile::Affine {
                offset,
                slope_bar,
                slope_n,
            } => [offset, slope_bar, slope_n].iter().all(|v| v.is_finite()),
            InitialProfile::Wave {
                offset,
                amplitude,
                wavenumber,
                slope_n,
            } => [offset, amplitude, wavenumber, slope_n].iter().all(|v| v.is_finite()),
            InitialProfile::CellPeriodic {
                offset,
                amplitude,
                slope_n,
            } => [offset, amplitude, slope_n].iter().all(|v| v.is_finite()),
        };
        if !finite {
            return Err(invalid(path, "parameters must be finite"));
        }
    }
    Ok(())
}

impl StudyConfig {
    pub fn eps_f64(&self) -> Vec<f64> {
        self.eps.iter().map(|q| to_f64(*q)).collect()
    }

    pub fn macro_settings(&self) -> MacroSettings {
        let mut s = MacroSettings::new(self.nodes, self.m);
        s.first_spacing = Some(self.first_spacing);
        s.grading = self.grading;
        s.solver = self.solver;
        s
    }

    /// Pretty JSON of the config with all defaults filled in.
    pub fn echo_json(&self) -> String {
        serde_json::to_string_pretty(&self.echo).expect("config serializes")
    }
}
