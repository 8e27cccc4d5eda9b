//! One-factor-at-a-time sweeps over the STRF hyperparameters.

use std::io::Write;

use crate::backbone::Network;
use crate::config::{AblateConfig, ModelConfig};
use crate::error::Result;
use crate::reid::{evaluate_network, Split, Tracklet};
use crate::strf::{Branch, StrfConfig};
use crate::synth::split_of;
use crate::train::{TrainConfig, Trainer};

/// Parameter columns count only weights that the setting uses.
pub const CSV_HEADER: &str = "axis,setting,params,strf_params,final_loss,rank1,map";

/// One configuration of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub axis: &'static str,
    pub label: String,
    pub strf: StrfConfig,
}

/// Every setting of the matrix; each differs from `base` along one axis.
pub fn settings(base: &StrfConfig, cfg: &AblateConfig) -> Vec<Setting> {
    let mut out = Vec::new();
    for &integration in &cfg.integrations {
        out.push(Setting {
            axis: "integration",
            label: integration.to_string(),
            strf: StrfConfig { integration, ..*base },
        });
    }
    for &(temporal_pool, spatial_pool) in &cfg.pools {
        out.push(Setting {
            axis: "pool",
            label: format!("{temporal_pool}/{spatial_pool}"),
            strf: StrfConfig {
                temporal_pool,
                spatial_pool,
                ..*base
            },
        });
    }
    for &branches in &cfg.branches {
        out.push(Setting {
            axis: "branches",
            label: branches.to_string(),
            strf: StrfConfig { branches, ..*base },
        });
    }
    for &(r_dynamic, r_static) in &cfg.resolutions {
        out.push(Setting {
            axis: "resolution",
            label: format!("{r_dynamic}/{r_static}"),
            strf: StrfConfig {
                r_dynamic,
                r_static,
                ..*base
            },
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: &'static str,
    pub setting: String,
    pub params: usize,
    pub strf_params: usize,
    pub final_loss: f32,
    pub rank1: f64,
    pub map: f64,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.axis, self.setting, self.params, self.strf_params, self.final_loss, self.rank1, self.map
        )
    }
}

/// Train and evaluate every setting from the same seed and data, writing
/// CSV rows to `out` as they complete.
pub fn run(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &[Tracklet],
    cfg: &AblateConfig,
    mut out: impl Write,
) -> Result<Vec<AblationRow>> {
    let classes = split_of(data, Split::Train).iter().map(|t| t.id).collect::<std::collections::BTreeSet<_>>().len();
    let (query, gallery) = (split_of(data, Split::Query), split_of(data, Split::Gallery));
    let train = TrainConfig {
        max_steps: Some(cfg.steps),
        ..train.clone()
    };
    writeln!(out, "{CSV_HEADER}")?;
    let mut rows = Vec::new();
    for s in settings(&model.strf, cfg) {
        let m = ModelConfig {
            strf: s.strf,
            ..model.clone()
        };
        let spec = m.network_spec(classes)?;
        let mut net = Network::<f32>::build(&spec, train.seed)?;
        let mut trainer = Trainer::new(&net, data, train.clone())?;
        let mut last = f32::NAN;
        for _ in 0..trainer.total_steps() {
            last = trainer.step(&mut net)?.total;
        }
        let r = evaluate_network(&net, &query, &gallery, train.t)?;
        let table = net.count_params();
        // weights of disabled branches are stored but never used
        let idle: usize = Branch::ALL
            .iter()
            .filter(|b| !s.strf.branches.contains(**b))
            .map(|b| table.sum_matching(&format!(".strf.{}", b.short())))
            .sum();
        let row = AblationRow {
            axis: s.axis,
            setting: s.label,
            params: table.total - idle,
            strf_params: table.strf_total() - idle,
            final_loss: last,
            rank1: r.rank(1),
            map: r.map,
        };
        writeln!(out, "{}", row.csv_line())?;
        rows.push(row);
    }
    Ok(rows)
}
