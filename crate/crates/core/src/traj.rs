//! Trajectory logs: one CSV record per agent per step. Agent 0 is the
//! robot; pedestrians follow in world order. The rho column carries the
//! robot's per-step deviation estimate when one exists, the ground-truth
//! mixture weight otherwise, and stays empty for agents with neither.

use std::fmt::Write as _;

use crate::sim::Snapshot;
use crate::vec2::{vec2, Vec2};

pub const TRAJECTORY_HEADER: &str = "episode,step,agent,px,py,vx,vy,radius,rho";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajRecord {
    pub episode: u64,
    pub step: u64,
    /// 0 = robot, 1.. = pedestrians.
    pub agent: u32,
    pub pos: Vec2,
    pub vel: Vec2,
    pub radius: f64,
    pub rho: Option<f64>,
}

/// Serialize one recorded episode. Step 0 is the initial placement.
pub fn trajectory_csv(episode: u64, trajectory: &[Snapshot]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for (step, snap) in trajectory.iter().enumerate() {
        let _ = writeln!(
            out,
            "{episode},{step},0,{:.6},{:.6},{:.6},{:.6},{:.6},",
            snap.robot.pos.x, snap.robot.pos.y, snap.robot.vel.x, snap.robot.vel.y, snap.robot.radius,
        );
        for (i, ped) in snap.peds.iter().enumerate() {
            let rho = ped.rho_hat.or(ped.rho_true);
            let rho_field = rho.map(|r| format!("{r:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{episode},{step},{},{:.6},{:.6},{:.6},{:.6},{:.6},{rho_field}",
                i + 1,
                ped.obs.pos.x,
                ped.obs.pos.y,
                ped.obs.vel.x,
                ped.obs.vel.y,
                ped.obs.radius,
            );
        }
    }
    out
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrajParseError {
    #[error("line {line}: expected header {TRAJECTORY_HEADER:?}")]
    BadHeader { line: usize },
    #[error("line {line}: expected 9 fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: field {field:?} is not a number: {value:?}")]
    BadNumber {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("log contains no records")]
    Empty,
}

fn parse_num<T: std::str::FromStr>(
    s: &str,
    line: usize,
    field: &'static str,
) -> Result<T, TrajParseError> {
    s.parse().map_err(|_| TrajParseError::BadNumber {
        line,
        field,
        value: s.to_string(),
    })
}

/// Parse a log produced by [`trajectory_csv`] (possibly several episodes
/// concatenated under one header). Errors carry 1-based line numbers.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajRecord>, TrajParseError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == TRAJECTORY_HEADER => {}
        _ => return Err(TrajParseError::BadHeader { line: 1 }),
    }
    let mut records = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 9 {
            return Err(TrajParseError::FieldCount {
                line,
                found: fields.len(),
            });
        }
        let rho = if fields[8].trim().is_empty() {
            None
        } else {
            Some(parse_num(fields[8], line, "rho")?)
        };
        records.push(TrajRecord {
            episode: parse_num(fields[0], line, "episode")?,
            step: parse_num(fields[1], line, "step")?,
            agent: parse_num(fields[2], line, "agent")?,
            pos: vec2(
                parse_num(fields[3], line, "px")?,
                parse_num(fields[4], line, "py")?,
            ),
            vel: vec2(
                parse_num(fields[5], line, "vx")?,
                parse_num(fields[6], line, "vy")?,
            ),
            radius: parse_num(fields[7], line, "radius")?,
            rho,
        });
    }
    if records.is_empty() {
        return Err(TrajParseError::Empty);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{AgentFullState, PedSnapshot, PedestrianObservable};

    fn sample_snapshots() -> Vec<Snapshot> {
        (0..3)
            .map(|k| {
                let mut robot =
                    AgentFullState::new(vec2(k as f64, 0.0), vec2(5.0, 0.0), 0.3, 1.0);
                robot.vel = vec2(1.0, 0.0);
                Snapshot {
                    time: k as f64 * 0.25,
                    robot,
                    peds: vec![
                        PedSnapshot {
                            obs: PedestrianObservable {
                                pos: vec2(0.0, k as f64),
                                vel: vec2(0.0, 1.0),
                                radius: 0.25,
                            },
                            rho_true: Some(0.4),
                            rho_hat: Some(0.35),
                        },
                        PedSnapshot {
                            obs: PedestrianObservable {
                                pos: vec2(1.0, k as f64),
                                vel: vec2(0.0, 1.0),
                                radius: 0.25,
                            },
                            rho_true: None,
                            rho_hat: None,
                        },
                    ],
                }
            })
            .collect()
    }

    #[test]
    fn roundtrips_and_prefers_estimates() {
        let csv = trajectory_csv(7, &sample_snapshots());
        let records = parse_trajectory_csv(&csv).unwrap();
        assert_eq!(records.len(), 9);
        assert!(records.iter().all(|r| r.episode == 7));
        let robot: Vec<&TrajRecord> = records.iter().filter(|r| r.agent == 0).collect();
        assert_eq!(robot.len(), 3);
        assert_eq!(robot[2].pos, vec2(2.0, 0.0));
        assert_eq!(robot[0].rho, None);
        // The estimate wins over the ground truth when both exist.
        let ped1: Vec<&TrajRecord> = records.iter().filter(|r| r.agent == 1).collect();
        assert_eq!(ped1[0].rho, Some(0.35));
        let ped2: Vec<&TrajRecord> = records.iter().filter(|r| r.agent == 2).collect();
        assert_eq!(ped2[0].rho, None);
    }

    #[test]
    fn serialization_is_deterministic() {
        let a = trajectory_csv(1, &sample_snapshots());
        let b = trajectory_csv(1, &sample_snapshots());
        assert_eq!(a, b);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert_eq!(
            parse_trajectory_csv("nonsense\n1,2,3"),
            Err(TrajParseError::BadHeader { line: 1 })
        );
        let short = format!("{TRAJECTORY_HEADER}\n0,0,0,1.0,2.0\n");
        assert_eq!(
            parse_trajectory_csv(&short),
            Err(TrajParseError::FieldCount { line: 2, found: 5 })
        );
        let bad = format!("{TRAJECTORY_HEADER}\n0,0,0,1,0,0,0,0.3,\n0,1,0,x,0,0,0,0.3,\n");
        assert_eq!(
            parse_trajectory_csv(&bad),
            Err(TrajParseError::BadNumber {
                line: 3,
                field: "px",
                value: "x".into()
            })
        );
        assert_eq!(
            parse_trajectory_csv(&format!("{TRAJECTORY_HEADER}\n")),
            Err(TrajParseError::Empty)
        );
    }
}
