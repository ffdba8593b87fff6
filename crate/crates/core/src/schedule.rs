//! Learning-rate policies and multi-stage resolution plans.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrKind {
    Cosine,
    Step,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPolicy {
    pub kind: LrKind,
    pub base: f64,
    /// Horizon `T` for cosine decay.
    #[serde(default)]
    pub total_epochs: usize,
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_period() -> usize {
    40
}

fn default_factor() -> f64 {
    0.1
}

impl LrPolicy {
    pub fn cosine(base: f64, total_epochs: usize) -> Self {
        LrPolicy {
            kind: LrKind::Cosine,
            base,
            total_epochs,
            period: default_period(),
            factor: default_factor(),
        }
    }

    pub fn step(base: f64, period: usize, factor: f64) -> Self {
        LrPolicy {
            kind: LrKind::Step,
            base,
            total_epochs: 0,
            period,
            factor,
        }
    }

    pub fn constant(base: f64) -> Self {
        LrPolicy {
            kind: LrKind::Constant,
            base,
            total_epochs: 0,
            period: default_period(),
            factor: default_factor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::config("lr.base", format!("must be positive, got {}", self.base)));
        }
        if self.kind == LrKind::Step {
            if self.period == 0 {
                return Err(Error::config("lr.period", "must be positive"));
            }
            if !(self.factor > 0.0 && self.factor < 1.0) {
                return Err(Error::config("lr.factor", "must lie in (0, 1)"));
            }
        }
        if self.kind == LrKind::Cosine && self.total_epochs == 0 {
            return Err(Error::config("lr.total_epochs", "cosine decay needs a positive horizon"));
        }
        Ok(())
    }

    /// Learning rate for (possibly fractional) epoch `t`.
    pub fn at(&self, t: f64) -> Result<f64> {
        match self.kind {
            LrKind::Cosine => cosine_lr(t, self.base, self.total_epochs),
            LrKind::Step => Ok(step_lr(t.floor() as usize, self.base, self.period, self.factor)),
            LrKind::Constant => Ok(self.base),
        }
    }
}

/// `base·½(1 + cos(πt/T))`.
pub fn cosine_lr(t: f64, base: f64, total: usize) -> Result<f64> {
    let total_f = total as f64;
    if !(0.0..=total_f).contains(&t) || total == 0 {
        return Err(Error::invalid(format!("epoch {t} outside the cosine horizon [0, {total}]")));
    }
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * t / total_f).cos()))
}

/// `base·factor^⌊epoch/period⌋`.
pub fn step_lr(epoch: usize, base: f64, period: usize, factor: f64) -> f64 {
    base * factor.powi((epoch / period.max(1)) as i32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitSource {
    #[default]
    Fresh,
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub resolution: usize,
    pub epochs: usize,
    #[serde(default)]
    pub init: InitSource,
    /// Overrides the experiment-wide batch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Overrides the experiment-wide learning-rate policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<LrPolicy>,
}

impl StagePlan {
    pub fn new(resolution: usize, epochs: usize) -> Self {
        StagePlan {
            resolution,
            epochs,
            init: InitSource::Fresh,
            batch_size: None,
            lr: None,
        }
    }
}

/// A validated plan plus any non-fatal findings.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidPlan {
    pub stages: Vec<StagePlan>,
    pub warnings: Vec<String>,
}

/// Check a curriculum and fix its init sources: the first stage starts fresh,
/// later ones continue from their predecessor.
pub fn validate_plan(stages: &[StagePlan]) -> Result<ValidPlan> {
    if stages.is_empty() {
        return Err(Error::config("plan", "at least one stage is required"));
    }
    let mut warnings = Vec::new();
    let mut out = Vec::with_capacity(stages.len());
    for (i, s) in stages.iter().enumerate() {
        if s.resolution == 0 {
            return Err(Error::config(format!("plan[{i}].resolution"), "must be positive"));
        }
        if s.epochs == 0 {
            return Err(Error::config(format!("plan[{i}].epochs"), "must be positive"));
        }
        if s.batch_size == Some(0) {
            return Err(Error::config(format!("plan[{i}].batch_size"), "must be positive"));
        }
        if let Some(lr) = &s.lr {
            lr.validate()?;
        }
        let mut s = s.clone();
        let want = if i == 0 { InitSource::Fresh } else { InitSource::Previous };
        if s.init != want {
            warnings.push(format!("plan[{i}]: init source set to {want:?}"));
            s.init = want;
        }
        if i > 0 && s.resolution < stages[i - 1].resolution {
            warnings.push(format!(
                "plan[{i}]: resolution decreases from {} to {}",
                stages[i - 1].resolution,
                s.resolution
            ));
        }
        out.push(s);
    }
    Ok(ValidPlan { stages: out, warnings })
}

/// Compact `R:E,R:E` plan notation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanString(pub Vec<(usize, usize)>);

impl FromStr for PlanString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (r, e) = part
                .split_once(':')
                .ok_or_else(|| Error::config("plan", format!("`{part}` is not RES:EPOCHS")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config("plan", format!("`{v}` is not a non-negative integer")))
            };
            out.push((parse(r)?, parse(e)?));
        }
        if out.is_empty() {
            return Err(Error::config("plan", "empty plan"));
        }
        Ok(PlanString(out))
    }
}

impl fmt::Display for PlanString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(r, e)| format!("{r}:{e}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl PlanString {
    pub fn from_stages(stages: &[StagePlan]) -> Self {
        PlanString(stages.iter().map(|s| (s.resolution, s.epochs)).collect())
    }

    pub fn stages(&self) -> Vec<StagePlan> {
        self.0.iter().map(|&(r, e)| StagePlan::new(r, e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.0, 0.1, 100).unwrap(), 0.1);
        assert!(cosine_lr(100.0, 0.1, 100).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50.0, 0.1, 100).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(101.0, 0.1, 100).is_err());
        assert!(cosine_lr(-1.0, 0.1, 100).is_err());
    }

    #[test]
    fn step_examples() {
        assert_eq!(step_lr(0, 0.01, 40, 0.1), 0.01);
        assert!((step_lr(40, 0.01, 40, 0.1) - 0.001).abs() < 1e-18);
        assert!((step_lr(80, 0.01, 40, 0.1) - 0.0001).abs() < 1e-18);
        assert!((step_lr(39, 10.0, 40, 0.1) - 10.0).abs() < 1e-15);
        assert!((step_lr(40, 10.0, 40, 0.1) - 1.0).abs() < 1e-15);
        let drops = (1..120)
            .filter(|&e| step_lr(e, 1.0, 40, 0.1) != step_lr(e - 1, 1.0, 40, 0.1))
            .count();
        assert_eq!(drops, 2);
    }

    #[test]
    fn policy_validation() {
        assert!(LrPolicy::cosine(0.1, 10).validate().is_ok());
        assert!(LrPolicy::cosine(0.0, 10).validate().is_err());
        assert!(LrPolicy::step(0.1, 40, 1.5).validate().is_err());
        assert!(LrPolicy::step(0.1, 0, 0.1).validate().is_err());
        assert_eq!(LrPolicy::constant(0.1).at(7.0).unwrap(), 0.1);
    }

    #[test]
    fn plan_examples() {
        let flagship = [StagePlan::new(56, 800), StagePlan::new(112, 200), StagePlan::new(224, 100)];
        let v = validate_plan(&flagship).unwrap();
        assert_eq!(v.stages[0].init, InitSource::Fresh);
        assert!(v.stages[1..].iter().all(|s| s.init == InitSource::Previous));
        assert!(v.warnings.iter().all(|w| !w.contains("decreases")));
        assert!(validate_plan(&[StagePlan::new(224, 800)]).is_ok());
        assert!(validate_plan(&[]).is_err());
        let v = validate_plan(&[StagePlan::new(224, 1), StagePlan::new(112, 1)]).unwrap();
        assert!(v.warnings.iter().any(|w| w.contains("decreases")));
        assert!(validate_plan(&[StagePlan::new(224, 0)]).is_err());
    }

    #[test]
    fn plan_string_round_trip() {
        let p: PlanString = "112:800, 224:200".parse().unwrap();
        assert_eq!(p.0, vec![(112, 800), (224, 200)]);
        assert_eq!(p.to_string(), "112:800,224:200");
        assert!("112".parse::<PlanString>().is_err());
        assert!("a:1".parse::<PlanString>().is_err());
        assert!("".parse::<PlanString>().is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_monotone(total in 1usize..500, base in 1e-4f64..10.0) {
            let mut prev = f64::INFINITY;
            for t in 0..=total {
                let lr = cosine_lr(t as f64, base, total).unwrap();
                prop_assert!(lr <= prev + 1e-15 && lr >= 0.0);
                prev = lr;
            }
        }

        #[test]
        fn step_has_floor_t_over_period_drops(total in 1usize..300, period in 1usize..50) {
            let drops = (1..=total)
                .filter(|&e| step_lr(e, 1.0, period, 0.1) < step_lr(e - 1, 1.0, period, 0.1))
                .count();
            prop_assert_eq!(drops, total / period);
        }
    }
}
