//! Parametric energy accounting.
//!
//! The presets are modeled coefficients chosen to give platform totals of
//! roughly 0.8 W and 4.3 W when every resource is active. They are knobs for
//! qualitative experiments, not measurements of any board.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RunReport;
use crate::partitioner::ResourceKind;

/// Watts per resource, plus a platform baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub p_cc_active: f64,
    pub p_cc_idle: f64,
    pub p_fc_active: f64,
    pub p_fc_idle: f64,
    pub p_static: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid power model: {0}")]
pub struct PowerModelError(pub String);

impl PowerModel {
    /// Modeled dual-core + single-FC platform (2 x 0.2 + 0.15 + 0.25 = 0.8 W all-active).
    pub const ZYNQ: PowerModel = PowerModel {
        p_cc_active: 0.20,
        p_cc_idle: 0.04,
        p_fc_active: 0.15,
        p_fc_idle: 0.03,
        p_static: 0.25,
    };

    /// Modeled quad-core + four-FC platform (4 x 0.55 + 4 x 0.35 + 0.75 = 4.35 W all-active).
    pub const ZYNQ_ULTRASCALE: PowerModel = PowerModel {
        p_cc_active: 0.55,
        p_cc_idle: 0.10,
        p_fc_active: 0.35,
        p_fc_idle: 0.07,
        p_static: 0.75,
    };

    pub fn validate(&self) -> Result<(), PowerModelError> {
        let all = [
            self.p_cc_active,
            self.p_cc_idle,
            self.p_fc_active,
            self.p_fc_idle,
            self.p_static,
        ];
        if all.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(PowerModelError("coefficients must be finite and >= 0".into()));
        }
        if self.p_cc_active < self.p_cc_idle || self.p_fc_active < self.p_fc_idle {
            return Err(PowerModelError("active power must be >= idle power".into()));
        }
        Ok(())
    }
}

/// Joules: each token is charged active power while busy and idle power for
/// the rest of the run, plus the baseline for the whole run.
pub fn compute_energy(report: &RunReport, pm: &PowerModel) -> f64 {
    let wall = report.wall_time.as_secs_f64();
    let per_resource: f64 = report
        .per_resource_busy
        .iter()
        .map(|(token, busy)| {
            let busy = busy.as_secs_f64().min(wall);
            let (active, idle) = match token.kind {
                ResourceKind::Cc => (pm.p_cc_active, pm.p_cc_idle),
                ResourceKind::Fc => (pm.p_fc_active, pm.p_fc_idle),
            };
            busy * active + (wall - busy) * idle
        })
        .sum();
    per_resource + wall * pm.p_static
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Token;
    use std::time::Duration;

    fn report(wall: f64, busy: &[(ResourceKind, usize, f64)]) -> RunReport {
        RunReport {
            wall_time: Duration::from_secs_f64(wall),
            per_resource_busy: busy
                .iter()
                .map(|&(kind, id, b)| (Token { kind, id }, Duration::from_secs_f64(b)))
                .collect(),
            trace: Vec::new(),
            iterations_done: 0,
            final_f: 1.0,
            warnings: Vec::new(),
        }
    }

    const ZERO: PowerModel = PowerModel {
        p_cc_active: 0.0,
        p_cc_idle: 0.0,
        p_fc_active: 0.0,
        p_fc_idle: 0.0,
        p_static: 0.0,
    };

    #[test]
    fn single_busy_core() {
        let pm = PowerModel {
            p_cc_active: 0.2,
            ..ZERO
        };
        let e = compute_energy(&report(10.0, &[(ResourceKind::Cc, 0, 10.0)]), &pm);
        assert!((e - 2.0).abs() < 1e-12);
    }

    #[test]
    fn idle_run_is_static_only() {
        let pm = PowerModel {
            p_static: 0.5,
            ..ZERO
        };
        assert!((compute_energy(&report(5.0, &[]), &pm) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn presets_are_valid() {
        PowerModel::ZYNQ.validate().unwrap();
        PowerModel::ZYNQ_ULTRASCALE.validate().unwrap();
        let bad = PowerModel {
            p_cc_idle: 1.0,
            ..ZERO
        };
        assert!(bad.validate().is_err());
    }
}
