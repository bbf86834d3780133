//! Pass scheduling and the fission/fusion combination modes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fission::{run_fission, FissionConfig, FissionError, FissionStats};
use crate::fusion::{run_fusion, FusionConfig, FusionError, FusionStats};
use crate::ir::Module;
use crate::provenance::{ProvenanceMap, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Identity,
    FissionOnly,
    FusionOnly,
    /// Fuse only the outlined functions.
    FufiSep,
    /// Fuse only functions fission left alone.
    FufiOri,
    /// Fuse outlined and untouched functions together.
    FufiAll,
}

impl Mode {
    pub const ALL: [Mode; 6] =
        [Mode::Identity, Mode::FissionOnly, Mode::FusionOnly, Mode::FufiSep, Mode::FufiOri, Mode::FufiAll];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Identity => "identity",
            Mode::FissionOnly => "fission_only",
            Mode::FusionOnly => "fusion_only",
            Mode::FufiSep => "fufi_sep",
            Mode::FufiOri => "fufi_ori",
            Mode::FufiAll => "fufi_all",
        }
    }

    fn fission(self) -> bool {
        matches!(self, Mode::FissionOnly | Mode::FufiSep | Mode::FufiOri | Mode::FufiAll)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown mode `{0}` (expected one of identity, fission_only, fusion_only, fufi_sep, fufi_ori, fufi_all)")]
pub struct UnknownMode(pub String);

impl FromStr for Mode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObfuscationConfig {
    pub mode: Mode,
    pub seed: u64,
    pub fission: FissionConfig,
    pub fusion: FusionConfig,
}

impl ObfuscationConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        ObfuscationConfig { mode, seed, fission: FissionConfig::default(), fusion: FusionConfig::default() }
    }

    pub const KEYS: [&'static str; 5] = [
        "fission.min_effect",
        "fission.max_regions_per_function",
        "fission.default_trip_count",
        "fusion.deep",
        "fusion.max_params",
    ];

    /// Sets one tunable by its dotted name. `none` lifts the region cap.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let bad = || ConfigError::BadValue(key.to_string(), value.to_string());
        match key.trim() {
            "fission.min_effect" => self.fission.min_effect = v.parse().map_err(|_| bad())?,
            "fission.max_regions_per_function" => {
                self.fission.max_regions_per_function = match v {
                    "none" | "unlimited" => None,
                    x => Some(x.parse().map_err(|_| bad())?),
                }
            }
            "fission.default_trip_count" => self.fission.default_trip_count = v.parse().map_err(|_| bad())?,
            "fusion.deep" => self.fusion.deep = v.parse().map_err(|_| bad())?,
            "fusion.max_params" => self.fusion.max_params = v.parse().map_err(|_| bad())?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{1}` for {0}")]
    BadValue(String, String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Fission(#[from] FissionError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Fission and fusion statistics side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub mode: Mode,
    pub seed: u64,
    #[serde(rename = "Fission Ratio")]
    pub fission_ratio: f64,
    #[serde(rename = "#BB")]
    pub mean_bb: f64,
    #[serde(rename = "RR")]
    pub removal_rate: f64,
    #[serde(rename = "Fusion Ratio")]
    pub fusion_ratio: f64,
    #[serde(rename = "#RP")]
    pub reduced_params: f64,
    #[serde(rename = "#HBB")]
    pub innocuous_per_function: f64,
    pub counters: Counters,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub ori_funcs: usize,
    pub sep_funcs: usize,
    pub single_exit_regions: usize,
    pub multi_exit_regions: usize,
    pub return_exit_regions: usize,
    pub private_slots: usize,
    pub spilled_regs: usize,
    pub fresh_entries: usize,
    pub fusion_eligible: usize,
    pub fusion_pairs: usize,
    pub positional_pairs: usize,
    pub trampolines: usize,
    pub tagged_sides: usize,
    pub guarded_icalls: usize,
    pub deep_blocks: usize,
    pub rewritten_calls: usize,
}

impl StatsReport {
    pub fn new(mode: Mode, seed: u64, fi: &FissionStats, fu: &FusionStats) -> Self {
        let c = &fi.counters;
        StatsReport {
            mode,
            seed,
            fission_ratio: fi.fission_ratio(),
            mean_bb: fi.mean_bb(),
            removal_rate: fi.removal_rate(),
            fusion_ratio: fu.fusion_ratio(),
            reduced_params: fu.reduced_params(),
            innocuous_per_function: fu.innocuous_per_function(),
            counters: Counters {
                ori_funcs: fi.ori_funcs,
                sep_funcs: fi.sep_funcs,
                single_exit_regions: c.single_exit,
                multi_exit_regions: c.multi_exit,
                return_exit_regions: c.return_exits,
                private_slots: c.private_slots,
                spilled_regs: c.spilled_regs,
                fresh_entries: c.fresh_entries,
                fusion_eligible: fu.eligible,
                fusion_pairs: fu.pairs,
                positional_pairs: fu.positional_pairs,
                trampolines: fu.trampolines,
                tagged_sides: fu.tagged_sides,
                guarded_icalls: fu.guarded_icalls,
                deep_blocks: fu.deep_blocks,
                rewritten_calls: fu.call_sites,
            },
        }
    }

    /// The six headline metrics as (name, value).
    pub fn table(&self) -> [(&'static str, f64); 6] {
        [
            ("Fission Ratio", self.fission_ratio),
            ("#BB", self.mean_bb),
            ("RR", self.removal_rate),
            ("Fusion Ratio", self.fusion_ratio),
            ("#RP", self.reduced_params),
            ("#HBB", self.innocuous_per_function),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obfuscated {
    pub module: Module,
    pub provenance: ProvenanceMap,
    pub stats: StatsReport,
}

/// Runs the passes `cfg.mode` calls for.
pub fn obfuscate(m: &Module, cfg: &ObfuscationConfig) -> Result<Obfuscated, PipelineError> {
    let mut module = m.clone();
    let mut prov = ProvenanceMap::identity(m.functions.iter().map(|f| f.name.as_str()));
    let mut fi = FissionStats::default();
    let mut fu = FusionStats::default();
    if cfg.mode.fission() {
        let out = run_fission(&module, &cfg.fission)?;
        module = out.module;
        prov = out.provenance;
        fi = out.stats;
    }
    let pool: Option<Vec<String>> = match cfg.mode {
        Mode::Identity | Mode::FissionOnly => None,
        Mode::FusionOnly => Some(module.functions.iter().filter(|f| !f.external).map(|f| f.name.clone()).collect()),
        mode => Some(
            module
                .functions
                .iter()
                .filter(|f| !f.external)
                .filter(|f| {
                    let role = prov.get(&f.name).map(|o| o.role);
                    match mode {
                        Mode::FufiSep => role == Some(Role::SepFunc),
                        Mode::FufiOri => role == Some(Role::Unchanged),
                        _ => matches!(role, Some(Role::SepFunc | Role::Unchanged)),
                    }
                })
                .map(|f| f.name.clone())
                .collect(),
        ),
    };
    if let Some(pool) = pool {
        let out = run_fusion(&module, &pool, &cfg.fusion, cfg.seed)?;
        module = out.module;
        prov = prov.then(&out.provenance);
        fu = out.stats;
    }
    let stats = StatsReport::new(cfg.mode, cfg.seed, &fi, &fu);
    Ok(Obfuscated { module, provenance: prov, stats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(flatten)]
    pub provenance: ProvenanceMap,
    pub seed: u64,
    pub mode: Mode,
}

/// The provenance sidecar as pretty-printed JSON.
pub fn sidecar_json(prov: &ProvenanceMap, seed: u64, mode: Mode) -> String {
    serde_json::to_string_pretty(&Sidecar { provenance: prov.clone(), seed, mode }).expect("sidecar serializes")
}

pub fn parse_sidecar(text: &str) -> Result<Sidecar, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{run, Limits};
    use crate::ir::{print_module, validate};
    use crate::samples;

    #[test]
    fn every_mode_preserves_cal_file() {
        let m = samples::cal_file();
        for mode in Mode::ALL {
            let o = obfuscate(&m, &ObfuscationConfig::new(mode, 42)).unwrap();
            assert!(validate(&o.module).is_empty(), "{mode}\n{}", print_module(&o.module));
            for f in &o.module.functions {
                assert!(!o.provenance.origins(&f.name).is_empty(), "{mode}: {} has no origin", f.name);
            }
            assert_eq!(o.provenance.all_origins().len(), m.functions.len());
            for args in samples::cal_file_inputs() {
                let a = run(&m, "main", &args, Limits::default()).unwrap();
                let b = run(&o.module, "main", &args, Limits::default()).unwrap();
                assert!(a.same_behavior(&b), "{mode}");
            }
        }
    }

    #[test]
    fn fufi_sep_emits_no_tags_or_trampolines() {
        let o = obfuscate(&samples::cal_file(), &ObfuscationConfig::new(Mode::FufiSep, 1)).unwrap();
        assert_eq!(o.stats.counters.fusion_pairs, 1);
        assert_eq!(o.stats.counters.trampolines + o.stats.counters.tagged_sides, 0);
        let fus = o.provenance.functions.values().find(|x| x.role == Role::FusFunc).unwrap();
        assert_eq!(fus.origins.iter().collect::<Vec<_>>(), vec!["cal_file"]);
    }

    #[test]
    fn deterministic_output_and_sidecar_round_trip() {
        let m = samples::cal_file();
        let cfg = ObfuscationConfig::new(Mode::FufiAll, 9);
        let a = obfuscate(&m, &cfg).unwrap();
        let b = obfuscate(&m, &cfg).unwrap();
        assert_eq!(print_module(&a.module), print_module(&b.module));
        let text = sidecar_json(&a.provenance, 9, Mode::FufiAll);
        let back = parse_sidecar(&text).unwrap();
        assert_eq!(back.provenance, a.provenance);
        assert_eq!(back.mode, Mode::FufiAll);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["functions"].is_object() && v["seed"] == 9 && v["mode"] == "fufi_all");
    }

    #[test]
    fn stats_report_names() {
        let o = obfuscate(&samples::cal_file(), &ObfuscationConfig::new(Mode::FufiAll, 3)).unwrap();
        let v = serde_json::to_value(&o.stats).unwrap();
        for (k, _) in o.stats.table() {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!("fufi_ori".parse::<Mode>().unwrap(), Mode::FufiOri);
        assert!("fufi".parse::<Mode>().is_err());
    }
}
