//! Failure scenarios and the probes that enforce them.
//!
//! Every scenario targets one group path and is compiled into either a
//! scheduler probe (timeout and probabilistic kills) or a network probe
//! (omission and duplication). All probes share the simulation's single
//! random stream and only draw from it after the group check passes, so a
//! workload outside the target group never shifts the sequence.
//!
//! The probabilistic kill fires per schedule, not per unit of time: a task
//! that is scheduled more often dies sooner.
//!
//! # Random stream
//!
//! [`RandomStream`] is xoshiro256++ seeded through SplitMix64
//! (`seed_from_u64`). `randint(n)` draws 64-bit words and rejects those
//! below `2^64 mod n`, then reduces modulo `n`. Both steps are fixed here so
//! traces are reproducible from the seed alone.

use std::fmt;
use std::str::FromStr;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::netsim::{NetDecision, NetworkProbe};
use crate::proc_model::validate_group_path;
use crate::scheduler::{ProbeDecision, SchedulerProbe};
use crate::{SimError, Simulation, Tick};

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    rng: Xoshiro256PlusPlus,
    words: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream {
            seed,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            words: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words consumed so far.
    pub fn position(&self) -> u64 {
        self.words
    }

    pub fn next_u64(&mut self) -> u64 {
        self.words += 1;
        self.rng.next_u64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn randint(&mut self, n: u64) -> Result<u64, SimError> {
        if n == 0 {
            return Err(SimError::EmptyRange);
        }
        let reject_below = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= reject_below {
                return Ok(x % n);
            }
        }
    }
}

/// A probability with six decimal digits of resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Probability {
    ppm: u32,
}

impl Probability {
    pub const SCALE: u32 = 1_000_000;
    pub const ZERO: Probability = Probability { ppm: 0 };
    pub const ONE: Probability = Probability { ppm: Self::SCALE };

    pub fn from_ppm(ppm: u32) -> Option<Self> {
        (ppm <= Self::SCALE).then_some(Probability { ppm })
    }

    pub fn ppm(self) -> u32 {
        self.ppm
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.ppm) / f64::from(Self::SCALE)
    }

    /// One draw from `rng`: true with this probability.
    pub fn sample(self, rng: &mut RandomStream) -> bool {
        let draw = rng
            .randint(u64::from(Self::SCALE))
            .expect("scale is non-zero");
        draw < u64::from(self.ppm)
    }
}

impl FromStr for Probability {
    type Err = String;

    /// Plain decimal in `[0, 1]` with at most six fractional digits.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        let digits_only = |part: &str| part.bytes().all(|b| b.is_ascii_digit());
        if int.is_empty() && frac.is_empty() || !digits_only(int) || !digits_only(frac) {
            return Err(format!("{s:?} is not a decimal probability"));
        }
        if frac.len() > 6 {
            return Err(format!("{s:?} has more than six decimal places"));
        }
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse()
                .map_err(|_| format!("{s:?} is out of range [0, 1]"))?
        };
        let frac_ppm: u64 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<6}").parse().expect("six ascii digits")
        };
        let ppm = int
            .checked_mul(u64::from(Self::SCALE))
            .and_then(|v| v.checked_add(frac_ppm))
            .filter(|&v| v <= u64::from(Self::SCALE))
            .ok_or_else(|| format!("{s:?} is out of range [0, 1]"))?;
        Ok(Probability { ppm: ppm as u32 })
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ppm == Self::SCALE {
            return f.write_str("1");
        }
        let frac = format!("{:06}", self.ppm);
        let frac = frac.trim_end_matches('0');
        if frac.is_empty() {
            f.write_str("0")
        } else {
            write!(f, "0.{frac}")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// Kill a task at the first switch where its run time exceeds `timeout`.
    KillAfter { timeout: Tick },
    /// Kill with probability `numerator / denominator` at every switch.
    KillProb { numerator: u64, denominator: u64 },
    /// Drop outgoing messages.
    Omission(Probability),
    /// Deliver outgoing messages twice.
    Duplication(Probability),
}

impl ScenarioKind {
    fn keyword(&self) -> &'static str {
        match self {
            ScenarioKind::KillAfter { .. } => "kill-after",
            ScenarioKind::KillProb { .. } => "kill-prob",
            ScenarioKind::Omission(_) => "drop",
            ScenarioKind::Duplication(_) => "dup",
        }
    }

    fn is_scheduler_kind(&self) -> bool {
        matches!(
            self,
            ScenarioKind::KillAfter { .. } | ScenarioKind::KillProb { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub target_group: String,
}

impl Scenario {
    /// Checks the group path and the kind's numeric ranges.
    pub fn new(kind: ScenarioKind, target_group: &str) -> Result<Self, SimError> {
        validate_group_path(target_group)?;
        if let ScenarioKind::KillProb {
            numerator,
            denominator,
        } = kind
        {
            if denominator == 0 || numerator > denominator {
                return Err(SimError::InvalidConfig(format!(
                    "kill probability {numerator}/{denominator} is not in [0, 1]"
                )));
            }
        }
        Ok(Scenario {
            kind,
            target_group: target_group.to_owned(),
        })
    }

    pub fn kill_after(group: &str, timeout: Tick) -> Result<Self, SimError> {
        Self::new(ScenarioKind::KillAfter { timeout }, group)
    }

    pub fn kill_prob(group: &str, numerator: u64, denominator: u64) -> Result<Self, SimError> {
        Self::new(
            ScenarioKind::KillProb {
                numerator,
                denominator,
            },
            group,
        )
    }

    pub fn omission(group: &str, p: Probability) -> Result<Self, SimError> {
        Self::new(ScenarioKind::Omission(p), group)
    }

    pub fn duplication(group: &str, p: Probability) -> Result<Self, SimError> {
        Self::new(ScenarioKind::Duplication(p), group)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ", self.kind.keyword(), self.target_group)?;
        match self.kind {
            ScenarioKind::KillAfter { timeout } => write!(f, "{timeout}"),
            ScenarioKind::KillProb {
                numerator,
                denominator,
            } => write!(f, "{numerator}/{denominator}"),
            ScenarioKind::Omission(p) | ScenarioKind::Duplication(p) => write!(f, "{p}"),
        }
    }
}

/// Builds the context-switch probe for a kill scenario.
pub fn make_scheduler_probe(scenario: &Scenario) -> Result<SchedulerProbe, SimError> {
    let group = scenario.target_group.clone();
    match scenario.kind {
        ScenarioKind::KillAfter { timeout } => Ok(Box::new(move |ctx, _rng| {
            if ctx.registry.find_group(ctx.next) != group {
                return ProbeDecision::Run;
            }
            let ran_for = ctx.registry.task_time(ctx.next).unwrap_or(0);
            if ran_for > timeout {
                ProbeDecision::Skip
            } else {
                ProbeDecision::Run
            }
        })),
        ScenarioKind::KillProb {
            numerator,
            denominator,
        } => {
            if denominator == 0 || numerator > denominator {
                return Err(SimError::InvalidConfig(format!(
                    "kill probability {numerator}/{denominator} is not in [0, 1]"
                )));
            }
            Ok(Box::new(move |ctx, rng| {
                if ctx.registry.find_group(ctx.next) != group {
                    return ProbeDecision::Run;
                }
                let r = rng.randint(denominator).expect("denominator is non-zero");
                if r >= denominator - numerator {
                    ProbeDecision::Skip
                } else {
                    ProbeDecision::Run
                }
            }))
        }
        ScenarioKind::Omission(_) | ScenarioKind::Duplication(_) => Err(SimError::WrongProbeKind {
            scenario: scenario.kind.keyword(),
            wanted: "scheduler",
        }),
    }
}

/// Builds the send-time probe for an omission or duplication scenario. The
/// probe only considers messages whose sender is in the target group.
pub fn make_network_probe(scenario: &Scenario) -> Result<NetworkProbe, SimError> {
    let (p, verdict) = match scenario.kind {
        ScenarioKind::Omission(p) => (p, NetDecision::Drop),
        ScenarioKind::Duplication(p) => (p, NetDecision::Duplicate),
        ScenarioKind::KillAfter { .. } | ScenarioKind::KillProb { .. } => {
            return Err(SimError::WrongProbeKind {
                scenario: scenario.kind.keyword(),
                wanted: "network",
            })
        }
    };
    let group = scenario.target_group.clone();
    Ok(Box::new(move |ctx, rng| {
        if ctx.registry.find_group(ctx.message.sender) != group {
            return NetDecision::Pass;
        }
        if p.sample(rng) {
            verdict
        } else {
            NetDecision::Pass
        }
    }))
}

/// Registers every scenario's probe, in order.
pub fn install_scenarios(sim: &mut Simulation, scenarios: &[Scenario]) -> Result<(), SimError> {
    for scenario in scenarios {
        if scenario.kind.is_scheduler_kind() {
            sim.register_probe(make_scheduler_probe(scenario)?)?;
        } else {
            sim.register_net_probe(make_network_probe(scenario)?)?;
        }
    }
    Ok(())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

/// Parses a scenario file.
///
/// ```text
/// # comment
/// kill-after <group> <ticks>
/// kill-prob  <group> <num>/<den>
/// drop       <group> <probability>
/// dup        <group> <probability>
/// ```
pub fn load_scenarios(text: &str) -> Result<Vec<Scenario>, ScenarioError> {
    let mut scenarios = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fail = |message: String| ScenarioError { line, message };
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let [keyword, group, arg] = tokens[..] else {
            return Err(fail(format!(
                "expected `<kind> <group> <argument>`, got {content:?}"
            )));
        };
        let kind = match keyword {
            "kill-after" => ScenarioKind::KillAfter {
                timeout: arg
                    .parse()
                    .map_err(|_| fail(format!("{arg:?} is not a tick count")))?,
            },
            "kill-prob" => {
                let (num, den) = arg
                    .split_once('/')
                    .ok_or_else(|| fail(format!("{arg:?} is not a fraction <num>/<den>")))?;
                let parse = |s: &str| {
                    s.parse::<u64>()
                        .map_err(|_| fail(format!("{arg:?} is not a fraction <num>/<den>")))
                };
                ScenarioKind::KillProb {
                    numerator: parse(num)?,
                    denominator: parse(den)?,
                }
            }
            "drop" => ScenarioKind::Omission(arg.parse().map_err(fail)?),
            "dup" => ScenarioKind::Duplication(arg.parse().map_err(fail)?),
            other => return Err(fail(format!("unknown scenario kind {other:?}"))),
        };
        scenarios.push(Scenario::new(kind, group).map_err(|e| fail(e.to_string()))?);
    }
    Ok(scenarios)
}
