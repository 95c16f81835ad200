use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// `next_state` of each record equals `state` of the following one.
    pub fn is_chain_consistent(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].done || w[0].next_state == w[1].state)
    }
}

pub fn total_transitions(trajs: &[Trajectory]) -> usize {
    trajs.iter().map(Trajectory::len).sum()
}

/// CSV with columns `step, state_*, action_*, next_state_*, reward, done`.
/// `step` restarts at 0 for every trajectory.
pub fn write_trajectories_csv<W: Write>(out: W, trajs: &[Trajectory]) -> Result<()> {
    let first = trajs
        .iter()
        .flat_map(|t| t.transitions.first())
        .next()
        .ok_or_else(|| Error::Empty("trajectories".into()))?;
    let (ds, da) = (first.state.len(), first.action.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend((0..ds).map(|i| format!("state_{i}")));
    header.extend((0..da).map(|i| format!("action_{i}")));
    header.extend((0..ds).map(|i| format!("next_state_{i}")));
    header.push("reward".into());
    header.push("done".into());
    w.write_record(&header)?;
    for t in trajs {
        for (i, tr) in t.transitions.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(tr.state.iter().map(f64::to_string));
            row.extend(tr.action.iter().map(f64::to_string));
            row.extend(tr.next_state.iter().map(f64::to_string));
            row.push(tr.reward.to_string());
            row.push(u8::from(tr.done).to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_trajectories_csv`]; trajectories are split where `step` resets.
pub fn read_trajectories_csv<R: Read>(input: R) -> Result<Vec<Trajectory>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let ds = header.iter().filter(|h| h.starts_with("state_")).count();
    let da = header.iter().filter(|h| h.starts_with("action_")).count();
    if header.len() != 3 + 2 * ds + da {
        return Err(Error::Dimension("trajectory CSV header".into()));
    }
    let mut out: Vec<Trajectory> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let nums: Vec<f64> = rec
            .iter()
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|e| Error::InvalidParameter(format!("{x:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let step = nums[0] as usize;
        let tr = Transition {
            state: nums[1..1 + ds].to_vec(),
            action: nums[1 + ds..1 + ds + da].to_vec(),
            next_state: nums[1 + ds + da..1 + 2 * ds + da].to_vec(),
            reward: nums[1 + 2 * ds + da],
            done: nums[2 + 2 * ds + da] != 0.0,
        };
        if step == 0 || out.is_empty() {
            out.push(Trajectory {
                transitions: Vec::new(),
                seed: 0,
            });
        }
        out.last_mut().expect("pushed above").transitions.push(tr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_traj() -> impl Strategy<Value = Vec<Trajectory>> {
        let tr = (
            prop::collection::vec(-1e3f64..1e3, 2),
            -1.0f64..1.0,
            -1e3f64..1e3,
        )
            .prop_map(|(s, a, r)| Transition {
                next_state: vec![s[0] + 1.0, s[1]],
                state: s,
                action: vec![a],
                reward: r,
                done: false,
            });
        prop::collection::vec(prop::collection::vec(tr, 1..8), 1..4).prop_map(|ts| {
            ts.into_iter()
                .map(|transitions| Trajectory {
                    transitions,
                    seed: 0,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(trajs in arb_traj()) {
            let mut buf = Vec::new();
            write_trajectories_csv(&mut buf, &trajs).unwrap();
            let back = read_trajectories_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, trajs);
        }
    }

    #[test]
    fn header_layout() {
        let t = Trajectory {
            transitions: vec![Transition {
                state: vec![0.1, 0.2],
                action: vec![0.5],
                next_state: vec![0.3, 0.4],
                reward: 1.0,
                done: true,
            }],
            seed: 3,
        };
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &[t]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "step,state_0,state_1,action_0,next_state_0,next_state_1,reward,done"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "0,0.1,0.2,0.5,0.3,0.4,1,1");
    }
}
