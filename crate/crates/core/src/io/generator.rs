//! Seeded random markets that satisfy the size promise for a target `alpha`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{validate_instance, AdvertiserSpec, Instance, MarketError, MediatorSpec, TieOrder};
use crate::money::Money;
use crate::rational::{format_ratio, ratio_to_f64, serde_ratio, Ratio};

/// Hard cap on generated entities; scaling stops here.
pub const MAX_ENTITIES: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("no instance satisfying alpha = {alpha} after {attempts} attempts (last: {last})")]
    RetriesExhausted { alpha: String, attempts: u32, last: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountDist {
    Constant { value: u32 },
    /// Inclusive range.
    Uniform { low: u32, high: u32 },
}

impl CountDist {
    pub fn max(&self) -> u32 {
        match *self {
            CountDist::Constant { value } => value,
            CountDist::Uniform { high, .. } => high,
        }
    }

    fn min(&self) -> u32 {
        match *self {
            CountDist::Constant { value } => value,
            CountDist::Uniform { low, .. } => low,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            CountDist::Constant { value } => value,
            CountDist::Uniform { low, high } => rng.random_range(low..=high),
        }
    }
}

/// Amount distribution, snapped onto the generator's grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MoneyDist {
    /// Inclusive, in whole grid steps.
    Uniform { low: Money, high: Money },
    LogNormal { mu: f64, sigma: f64 },
}

impl MoneyDist {
    fn check(&self) -> Result<(), String> {
        match *self {
            MoneyDist::Uniform { low, high } if low.is_negative() || high < low => {
                Err(format!("uniform range [{low}, {high}] must be non-negative and ordered"))
            }
            MoneyDist::LogNormal { mu, sigma } if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 => {
                Err(format!("lognormal parameters mu = {mu}, sigma = {sigma} are invalid"))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, grid: Money) -> Money {
        let step = grid.micros();
        match *self {
            MoneyDist::Uniform { low, high } => {
                let lo = (low.micros() + step - 1) / step;
                let hi = high.micros() / step;
                Money::from_micros(rng.random_range(lo..=hi.max(lo)) * step)
            }
            MoneyDist::LogNormal { mu, sigma } => {
                let x = LogNormal::new(mu, sigma).expect("checked parameters").sample(rng);
                Money::quantize(x.min(1e9), grid)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub mediators: usize,
    pub advertisers: usize,
    pub users_per_mediator: CountDist,
    pub capacity: CountDist,
    pub cost: MoneyDist,
    pub value: MoneyDist,
    /// Money grid the amounts are drawn on.
    pub grid: Money,
    #[serde(with = "serde_ratio")]
    pub target_alpha: Ratio,
    pub seed: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Grow the entity counts when the optimum is too small for the target.
    #[serde(default)]
    pub scale_to_fit: bool,
}

fn default_retries() -> u32 {
    32
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::InvalidConfig(m));
        use num::{One, Signed};
        if !self.target_alpha.is_positive() || self.target_alpha > Ratio::one() {
            return bad(format!("target alpha {} must lie in (0, 1]", format_ratio(&self.target_alpha)));
        }
        if self.mediators == 0 || self.advertisers == 0 {
            return bad("need at least one mediator and one advertiser".into());
        }
        if self.capacity.min() == 0 {
            return bad("capacities must be positive".into());
        }
        for d in [self.users_per_mediator, self.capacity] {
            if let CountDist::Uniform { low, high } = d {
                if low > high {
                    return bad(format!("count range {low}..={high} is empty"));
                }
            }
        }
        if self.grid <= Money::ZERO {
            return bad("grid step must be positive".into());
        }
        self.cost.check().map_err(GeneratorError::InvalidConfig)?;
        self.value.check().map_err(GeneratorError::InvalidConfig)?;
        if self.max_retries == 0 {
            return bad("max_retries must be positive".into());
        }
        Ok(())
    }

    /// Sizes entity counts so that the optimum is expected to reach `tau`
    /// when about half of the users can trade.
    pub fn sized_for_tau(mut self, tau: usize) -> Self {
        let avg = |d: CountDist| f64::from(d.min() + d.max()) / 2.0;
        self.mediators = ((2.0 * tau as f64) / avg(self.users_per_mediator).max(0.5)).ceil() as usize;
        self.advertisers = ((2.0 * tau as f64) / avg(self.capacity)).ceil() as usize;
        self
    }
}

fn draw<R: Rng + ?Sized>(config: &GeneratorConfig, mediators: usize, advertisers: usize, rng: &mut R) -> Instance {
    let meds = (0..mediators)
        .map(|_| {
            let n = config.users_per_mediator.sample(rng);
            MediatorSpec { user_costs: (0..n).map(|_| config.cost.sample(rng, config.grid)).collect() }
        })
        .collect();
    let advs = (0..advertisers)
        .map(|_| AdvertiserSpec { capacity: config.capacity.sample(rng), value: config.value.sample(rng, config.grid) })
        .collect();
    let tie = TieOrder::random(mediators, advertisers, rng);
    Instance::new(meds, advs, tie).expect("generated amounts are non-negative and capacities positive")
}

/// Draws instances until one passes validation for `target_alpha`.
pub fn generate_instance(config: &GeneratorConfig) -> Result<Instance, GeneratorError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut mediators, mut advertisers) = (config.mediators, config.advertisers);
    let largest = config.users_per_mediator.max().max(config.capacity.max()).max(1) as f64;
    let needed_tau = (largest / ratio_to_f64(&config.target_alpha)).ceil();
    let mut last = String::new();
    for _ in 0..config.max_retries {
        let instance = draw(config, mediators, advertisers, &mut rng);
        let tau = match validate_instance(&instance, &config.target_alpha) {
            Ok(report) if report.passed() => return Ok(instance),
            Ok(report) => {
                last = report.violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                report.tau
            }
            Err(MarketError::EmptyOptimum) => {
                last = "the optimum is empty".into();
                0
            }
            Err(e) => return Err(GeneratorError::InvalidConfig(e.to_string())),
        };
        if config.scale_to_fit && (tau as f64) < needed_tau {
            let factor = if tau == 0 { 2.0 } else { (needed_tau / tau as f64 * 1.1).max(1.1) };
            mediators = (mediators as f64 * factor).ceil() as usize;
            advertisers = (advertisers as f64 * factor).ceil() as usize;
            if mediators + advertisers > MAX_ENTITIES {
                return Err(GeneratorError::RetriesExhausted {
                    alpha: format_ratio(&config.target_alpha),
                    attempts: config.max_retries,
                    last: format!("{last}; scaling would exceed {MAX_ENTITIES} entities"),
                });
            }
        }
    }
    Err(GeneratorError::RetriesExhausted {
        alpha: format_ratio(&config.target_alpha),
        attempts: config.max_retries,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::tau;
    use crate::rational::parse_ratio;

    fn base(alpha: &str) -> GeneratorConfig {
        GeneratorConfig {
            mediators: 2,
            advertisers: 2,
            users_per_mediator: CountDist::Constant { value: 1 },
            capacity: CountDist::Constant { value: 1 },
            cost: MoneyDist::Uniform { low: Money::ZERO, high: Money::from_units(1) },
            value: MoneyDist::Uniform { low: Money::from_units(10), high: Money::from_units(20) },
            grid: Money::from_micros(10_000),
            target_alpha: parse_ratio(alpha).unwrap(),
            seed: 5,
            max_retries: 8,
            scale_to_fit: false,
        }
    }

    #[test]
    fn small_market_at_one_half() {
        let inst = generate_instance(&base("0.5")).unwrap();
        assert_eq!(tau(&inst), 2);
        assert!(validate_instance(&inst, &parse_ratio("0.5").unwrap()).unwrap().passed());
    }

    #[test]
    fn deterministic_per_seed() {
        let c = base("0.5");
        assert_eq!(generate_instance(&c).unwrap(), generate_instance(&c).unwrap());
    }

    #[test]
    fn unreachable_alpha_is_rejected_or_scaled() {
        let mut c = base("0.01");
        c.users_per_mediator = CountDist::Constant { value: 10 };
        assert!(matches!(generate_instance(&c), Err(GeneratorError::RetriesExhausted { .. })));
        c.scale_to_fit = true;
        c.max_retries = 64;
        let inst = generate_instance(&c).unwrap();
        assert!(tau(&inst) >= 1000);
        assert!(validate_instance(&inst, &c.target_alpha).unwrap().passed());
    }

    #[test]
    fn amounts_sit_on_the_grid() {
        let mut c = base("1");
        c.mediators = 20;
        c.cost = MoneyDist::LogNormal { mu: 0.0, sigma: 1.0 };
        c.grid = Money::from_micros(250_000);
        let inst = generate_instance(&c).unwrap();
        for m in inst.mediators() {
            for cost in &m.user_costs {
                assert_eq!(cost.micros() % 250_000, 0);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = base("0");
        assert!(matches!(generate_instance(&c), Err(GeneratorError::InvalidConfig(_))));
        c = base("0.5");
        c.capacity = CountDist::Uniform { low: 0, high: 2 };
        assert!(generate_instance(&c).is_err());
        c = base("0.5");
        c.cost = MoneyDist::Uniform { low: Money::from_units(3), high: Money::from_units(1) };
        assert!(generate_instance(&c).is_err());
    }
}
