use super::EvalError;
use serde::{Deserialize, Serialize};

/// Metered per-read charge of the hosted GPT-4.1 shortlister, in dollars.
/// Reported as given, not derived from runtime.
pub const GPT41_METERED_COST: f64 = 0.052;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModelParams {
    /// Board power in watts.
    pub power_watts: f64,
    pub pue: f64,
    pub price_kwh: f64,
    pub price_gpu_hour: f64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        CostModelParams {
            power_watts: 250.0,
            pue: 1.4,
            price_kwh: 0.20,
            price_gpu_hour: 0.20,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, v) in [
            ("power_watts", self.power_watts),
            ("pue", self.pue),
            ("price_kwh", self.price_kwh),
            ("price_gpu_hour", self.price_gpu_hour),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EvalError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Energy plus amortized GPU time for one read taking `t_seconds`:
/// `(P/1000)(t/3600) PUE p_kWh + (t/3600) p_GPU`.
pub fn cost_per_read(t_seconds: f64, params: &CostModelParams) -> Result<f64, EvalError> {
    if !(t_seconds >= 0.0) {
        return Err(EvalError::NegativeRuntime(t_seconds));
    }
    params.validate()?;
    let hours = t_seconds / 3600.0;
    Ok(params.power_watts / 1000.0 * hours * params.pue * params.price_kwh + hours * params.price_gpu_hour)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub method: String,
    pub runtime_seconds: f64,
    pub cost: f64,
    pub quality: f64,
}

/// Indices of points not dominated in (runtime, cost), in input order.
pub fn pareto_frontier(points: &[CostPoint]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            let p = &points[i];
            !points.iter().any(|q| {
                q.runtime_seconds <= p.runtime_seconds
                    && q.cost <= p.cost
                    && (q.runtime_seconds < p.runtime_seconds || q.cost < p.cost)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(r: f64, c: f64) -> CostPoint {
        CostPoint {
            method: String::new(),
            runtime_seconds: r,
            cost: c,
            quality: 0.0,
        }
    }

    #[test]
    fn frontier_examples() {
        assert_eq!(pareto_frontier(&[pt(1.0, 1.0)]), vec![0]);
        assert_eq!(pareto_frontier(&[pt(1.0, 1.0), pt(2.0, 2.0)]), vec![0]);
        assert_eq!(pareto_frontier(&[pt(1.0, 2.0), pt(2.0, 1.0)]), vec![0, 1]);
    }

    #[test]
    fn zero_runtime_costs_nothing() {
        assert_eq!(cost_per_read(0.0, &CostModelParams::default()).unwrap(), 0.0);
        assert!(cost_per_read(-1.0, &CostModelParams::default()).is_err());
    }
}
