//! Markov turn-taking with geometric holding times.
//!
//! The chain state is either silence or the index of the person holding the
//! floor. Every frame the state is left with probability `1 / mean_turn`.
//! Leaving silence hands the floor to a uniformly chosen person; leaving a
//! person goes to silence with `silence_prob`, otherwise to a uniformly
//! chosen other person (back to the same person when alone).

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnParams {
    pub people: usize,
    pub mean_turn_frames: f64,
    pub silence_prob: f64,
    pub overlap_prob: f64,
}

impl TurnParams {
    pub fn validate(&self) -> Result<()> {
        if self.people == 0 {
            return Err(Error::Config("at least one person is required".into()));
        }
        if !(self.mean_turn_frames >= 1.0) {
            return Err(Error::Config(format!("mean turn length {} must be at least one frame", self.mean_turn_frames)));
        }
        for (name, p) in [("silence_prob", self.silence_prob), ("overlap_prob", self.overlap_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn leave_prob(&self) -> f64 {
        1.0 / self.mean_turn_frames
    }
}

/// Per-frame activity of every person.
#[derive(Debug, Clone, PartialEq)]
pub struct Turns {
    /// `speaking[p][t]`.
    pub speaking: Vec<Vec<bool>>,
    /// Floor holder per frame; `None` is silence.
    pub floor: Vec<Option<usize>>,
}

impl Turns {
    pub fn any_speaking(&self, t: usize) -> bool {
        self.speaking.iter().any(|p| p[t])
    }

    pub fn frames(&self) -> usize {
        self.floor.len()
    }
}

fn geometric(rng: &mut impl Rng, q: f64) -> usize {
    if q >= 1.0 {
        return 1;
    }
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    (u.ln() / (1.0 - q).ln()).floor() as usize + 1
}

fn next_person(rng: &mut impl Rng, people: usize, current: usize) -> usize {
    if people == 1 {
        return current;
    }
    let j = rng.gen_range(0..people - 1);
    if j >= current {
        j + 1
    } else {
        j
    }
}

/// Simulates `frames` frames, starting from the chain's stationary law.
pub fn simulate_turns(params: &TurnParams, frames: usize, rng: &mut impl Rng) -> Result<Turns> {
    params.validate()?;
    let p = params.people;
    let q = params.leave_prob();
    let mut speaking = vec![vec![false; frames]; p];
    let mut floor = vec![None; frames];
    let silence_weight = params.silence_prob / (1.0 + params.silence_prob);
    let mut state = if rng.gen_bool(silence_weight) { None } else { Some(rng.gen_range(0..p)) };
    let mut t = 0;
    while t < frames {
        let len = geometric(rng, q).min(frames - t);
        if let Some(who) = state {
            for f in t..t + len {
                speaking[who][f] = true;
                floor[f] = Some(who);
            }
            if p > 1 && rng.gen_bool(params.overlap_prob) {
                let other = next_person(rng, p, who);
                let start = t + rng.gen_range(0..=len / 2);
                let olen = rng.gen_range((len / 4).max(1)..=len.max(1));
                for f in start..(start + olen).min(t + len) {
                    speaking[other][f] = true;
                }
            }
        }
        t += len;
        state = match state {
            None => Some(rng.gen_range(0..p)),
            Some(who) => {
                if rng.gen_bool(params.silence_prob) {
                    None
                } else {
                    Some(next_person(rng, p, who))
                }
            }
        };
    }
    Ok(Turns { speaking, floor })
}

/// Transition matrix over `[silence, person 0, …, person P-1]`.
pub fn transition_matrix(params: &TurnParams) -> Vec<Vec<f64>> {
    let p = params.people;
    let q = params.leave_prob();
    let n = p + 1;
    let mut m = vec![vec![0.0; n]; n];
    m[0][0] = 1.0 - q;
    for j in 1..n {
        m[0][j] = q / p as f64;
    }
    for i in 1..n {
        m[i][i] = 1.0 - q;
        m[i][0] += q * params.silence_prob;
        let rest = q * (1.0 - params.silence_prob);
        if p == 1 {
            m[i][i] += rest;
        } else {
            for j in 1..n {
                if j != i {
                    m[i][j] += rest / (p - 1) as f64;
                }
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use loconet_tensor::rng::derive_rng;

    #[test]
    fn rows_are_stochastic() {
        for people in 1..5 {
            let m = transition_matrix(&TurnParams { people, mean_turn_frames: 7.0, silence_prob: 0.3, overlap_prob: 0.0 });
            for row in m {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exclusive_floor_without_silence_or_overlap() {
        let params = TurnParams { people: 3, mean_turn_frames: 10.0, silence_prob: 0.0, overlap_prob: 0.0 };
        let turns = simulate_turns(&params, 500, &mut derive_rng(4, &[])).unwrap();
        for t in 0..500 {
            assert_eq!(turns.speaking.iter().filter(|p| p[t]).count(), 1);
        }
    }

    #[test]
    fn geometric_mean_matches() {
        let mut rng = derive_rng(9, &[]);
        let n = 20000;
        let mean = (0..n).map(|_| geometric(&mut rng, 0.2) as f64).sum::<f64>() / n as f64;
        assert!((mean - 5.0).abs() < 0.15, "{mean}");
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = TurnParams { people: 2, mean_turn_frames: 5.0, silence_prob: 1.5, overlap_prob: 0.0 };
        assert!(bad.validate().is_err());
        let bad = TurnParams { people: 0, mean_turn_frames: 5.0, silence_prob: 0.1, overlap_prob: 0.0 };
        assert!(bad.validate().is_err());
    }
}
