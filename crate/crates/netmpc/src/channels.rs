//! Erasure-channel models for the sensor and control links, plus the
//! seeded stream-splitting RNG plumbing every Monte-Carlo component uses.
//!
//! Channels are interchangeable strategies behind [`DropoutChannel`],
//! selected by name through [`ChannelSpec`] so experiment configs can swap
//! them at runtime.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("unknown channel kind `{0}` (expected bernoulli or gilbert_elliott)")]
    UnknownKind(String),
    #[error("invalid channel parameter: {0}")]
    BadParameter(String),
}

/// One delivery decision per call; `true` means the packet got through.
///
/// Implementations draw a fixed number of uniforms per call so sweeps over
/// channel parameters stay coupled under common random numbers.
pub trait DropoutChannel: Send {
    fn sample(&mut self, rng: &mut dyn RngCore) -> bool;
    fn name(&self) -> &'static str;
}

/// Declarative channel description (what the config file stores).
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSpec {
    Bernoulli {
        p: f64,
    },
    GilbertElliott {
        p_good_to_bad: f64,
        p_bad_to_good: f64,
        p_good: f64,
        p_bad: f64,
    },
}

impl ChannelSpec {
    /// Registry constructor: builds a spec from a kind name and named
    /// parameters, rejecting unknown kinds.
    pub fn from_name(kind: &str, get: &dyn Fn(&str) -> Option<f64>) -> Result<Self, ChannelError> {
        let req = |key: &str| {
            get(key).ok_or_else(|| ChannelError::BadParameter(format!("missing parameter `{key}`")))
        };
        match kind {
            "bernoulli" => Ok(ChannelSpec::Bernoulli { p: req("p")? }),
            "gilbert_elliott" => Ok(ChannelSpec::GilbertElliott {
                p_good_to_bad: req("p_gb")?,
                p_bad_to_good: req("p_bg")?,
                p_good: req("p_good")?,
                p_bad: req("p_bad")?,
            }),
            other => Err(ChannelError::UnknownKind(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let unit = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                Err(ChannelError::BadParameter(format!("{name} = {v} outside [0, 1]")))
            } else {
                Ok(())
            }
        };
        match *self {
            ChannelSpec::Bernoulli { p } => unit("p", p),
            ChannelSpec::GilbertElliott {
                p_good_to_bad,
                p_bad_to_good,
                p_good,
                p_bad,
            } => {
                unit("p_gb", p_good_to_bad)?;
                unit("p_bg", p_bad_to_good)?;
                unit("p_good", p_good)?;
                unit("p_bad", p_bad)?;
                if p_good_to_bad + p_bad_to_good <= 0.0 {
                    return Err(ChannelError::BadParameter(
                        "p_gb + p_bg must be positive for a stationary distribution".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Instantiates the channel; Gilbert-Elliott draws its initial Markov
    /// state from the stationary distribution using `rng`.
    pub fn build(&self, rng: &mut dyn RngCore) -> Result<Box<dyn DropoutChannel>, ChannelError> {
        self.validate()?;
        match *self {
            ChannelSpec::Bernoulli { p } => Ok(Box::new(BernoulliChannel { p })),
            ChannelSpec::GilbertElliott {
                p_good_to_bad,
                p_bad_to_good,
                p_good,
                p_bad,
            } => {
                let pi_good = p_bad_to_good / (p_good_to_bad + p_bad_to_good);
                let good = rng.random::<f64>() < pi_good;
                Ok(Box::new(GilbertElliottChannel {
                    p_good_to_bad,
                    p_bad_to_good,
                    p_good,
                    p_bad,
                    good,
                }))
            }
        }
    }

    /// Mean delivery probability in stationarity.
    pub fn stationary_rate(&self) -> f64 {
        match *self {
            ChannelSpec::Bernoulli { p } => p,
            ChannelSpec::GilbertElliott {
                p_good_to_bad,
                p_bad_to_good,
                p_good,
                p_bad,
            } => {
                let pi_good = p_bad_to_good / (p_good_to_bad + p_bad_to_good);
                pi_good * p_good + (1.0 - pi_good) * p_bad
            }
        }
    }
}

/// I.i.d. delivery with success probability `p`.
#[derive(Debug, Clone)]
pub struct BernoulliChannel {
    pub p: f64,
}

impl DropoutChannel for BernoulliChannel {
    fn sample(&mut self, rng: &mut dyn RngCore) -> bool {
        rng.random::<f64>() < self.p
    }

    fn name(&self) -> &'static str {
        "bernoulli"
    }
}

/// Two-state Markov (good/bad) dropout model. The chain transitions first,
/// then the delivery bit is drawn with the new state's success probability,
/// so a chain started from the stationary distribution stays stationary.
#[derive(Debug, Clone)]
pub struct GilbertElliottChannel {
    pub p_good_to_bad: f64,
    pub p_bad_to_good: f64,
    pub p_good: f64,
    pub p_bad: f64,
    good: bool,
}

impl GilbertElliottChannel {
    pub fn in_good_state(&self) -> bool {
        self.good
    }
}

impl DropoutChannel for GilbertElliottChannel {
    fn sample(&mut self, rng: &mut dyn RngCore) -> bool {
        let flip = rng.random::<f64>();
        self.good = if self.good {
            flip >= self.p_good_to_bad
        } else {
            flip < self.p_bad_to_good
        };
        let p = if self.good { self.p_good } else { self.p_bad };
        rng.random::<f64>() < p
    }

    fn name(&self) -> &'static str {
        "gilbert_elliott"
    }
}

/// Reproducible, splittable random stream: identical `(seed, stream)`
/// always replays the same draws, distinct streams are statistically
/// independent (ChaCha stream splitting).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

/// Stream-id layout for one simulation run. Per-path streams occupy
/// `path * 8 + role`; offline moment estimation uses a reserved block far
/// above any path index.
#[derive(Debug, Clone, Copy)]
pub enum StreamRole {
    InitialState = 0,
    ProcessNoise = 1,
    MeasurementNoise = 2,
    SensorChannel = 3,
    ControlChannel = 4,
}

pub fn path_stream(seed: u64, path: u64, role: StreamRole) -> RngStream {
    RngStream::new(seed, path * 8 + role as u64)
}

pub const MOMENTS_CHANNEL_STREAM: u64 = 1 << 62;
pub const MOMENTS_FILTER_STREAM: u64 = (1 << 62) + 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_certain_delivery() {
        let mut rng = RngStream::new(1, 0).rng();
        let mut ch = ChannelSpec::Bernoulli { p: 1.0 }.build(&mut rng).unwrap();
        assert!((0..1000).all(|_| ch.sample(&mut rng)));
    }

    #[test]
    fn bernoulli_mean_within_three_sigma() {
        let mut rng = RngStream::new(7, 1).rng();
        let mut ch = ChannelSpec::Bernoulli { p: 0.8 }.build(&mut rng).unwrap();
        let n = 100_000;
        let hits = (0..n).filter(|_| ch.sample(&mut rng)).count();
        let mean = hits as f64 / n as f64;
        // 3σ binomial bound: 3·sqrt(0.8·0.2/1e5) ≈ 0.0038.
        assert!((mean - 0.8).abs() < 0.004, "mean {mean}");
    }

    #[test]
    fn gilbert_elliott_long_run_rate() {
        let spec = ChannelSpec::GilbertElliott {
            p_good_to_bad: 0.2,
            p_bad_to_good: 0.9,
            p_good: 0.8,
            p_bad: 0.0,
        };
        let mut rng = RngStream::new(11, 2).rng();
        let mut ch = spec.build(&mut rng).unwrap();
        let n = 200_000;
        let hits = (0..n).filter(|_| ch.sample(&mut rng)).count();
        let mean = hits as f64 / n as f64;
        let expected = spec.stationary_rate();
        assert!((expected - 0.8 * (0.9 / 1.1)).abs() < 1e-12);
        assert!((mean - expected).abs() < 0.01, "mean {mean} vs {expected}");
    }

    #[test]
    fn gilbert_elliott_success_only_in_good_state_when_p_bad_zero() {
        let mut rng = RngStream::new(3, 3).rng();
        let mut ch = GilbertElliottChannel {
            p_good_to_bad: 0.3,
            p_bad_to_good: 0.5,
            p_good: 0.9,
            p_bad: 0.0,
            good: true,
        };
        for _ in 0..10_000 {
            let delivered = ch.sample(&mut rng);
            if delivered {
                assert!(ch.in_good_state());
            }
        }
    }

    #[test]
    fn streams_replay_exactly_and_decorrelate() {
        let draws = |stream: u64| -> Vec<f64> {
            let mut rng = RngStream::new(42, stream).rng();
            (0..100_000).map(|_| rng.random::<f64>()).collect()
        };
        let a = draws(0);
        assert_eq!(a, draws(0));
        let b = draws(1);
        let mean_a: f64 = a.iter().sum::<f64>() / a.len() as f64;
        let mean_b: f64 = b.iter().sum::<f64>() / b.len() as f64;
        let corr: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - mean_a) * (y - mean_b))
            .sum::<f64>()
            / a.len() as f64
            / (1.0 / 12.0);
        assert!(corr.abs() < 0.01, "corr {corr}");
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let got = ChannelSpec::from_name("laplace", &|_| Some(0.5));
        assert!(matches!(got, Err(ChannelError::UnknownKind(_))));
    }
}
