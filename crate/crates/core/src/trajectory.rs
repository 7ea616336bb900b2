//! Step records, session partitioning, and compilation of trajectories into
//! training sequences with per-action attention masks.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::QuestionId;
use crate::policy::DecisionPoint;
use crate::token::{FunctionName, Token, Vocabulary};

pub const TRAJECTORY_FORMAT: &str = "agile-trajectory";
pub const TRAJECTORY_VERSION: u32 = 1;

/// Stream position of the root BOS token.
pub const BOS_POSITION: usize = 0;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("step {step} is inconsistent with executor semantics: {reason}")]
    ReplayMismatch { step: usize, reason: String },
    #[error("trajectory ends inside an open session")]
    DanglingSession,
    #[error("step {step} falls outside any session")]
    OutsideSession { step: usize },
    #[error("malformed trajectory file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("vocabulary hash mismatch: file has {found}, expected {expected}")]
    VocabMismatch { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One executor step: action `a_i`, appended segment `e_i`, and the
/// context `c_i` the action was predicted from, as stream positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Token,
    pub emitted: Vec<Token>,
    #[serde(rename = "mask")]
    pub context: Vec<usize>,
    pub reward: f64,
}

/// A policy choice made at a decision point, with the log-probability
/// under the parameters that sampled it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    /// Index of the chosen action's step.
    pub step: usize,
    pub point: DecisionPoint,
    pub action: FunctionName,
    pub logprob: f64,
}

/// Summary of the state a session starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDigest {
    pub context: Vec<usize>,
    pub memory_size: usize,
    pub session_index: u64,
}

/// A recorded run spanning one or more sessions that share memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub initial_memory_size: usize,
    pub initial_session_index: u64,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionTrajectory {
    pub steps: Vec<StepRecord>,
    /// Decisions with session-relative step indices.
    pub decisions: Vec<DecisionRecord>,
    pub initial_state: StateDigest,
    pub total_reward: f64,
    /// Stream position of the session's first emitted token.
    pub stream_offset: usize,
    pub question: Option<QuestionId>,
    pub checkpoint: Option<String>,
}

/// Per-session facts the metrics need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionOutcome {
    pub sought_advice: bool,
    pub correct: bool,
    pub reward: f64,
}

impl SessionTrajectory {
    pub fn calls(&self, f: FunctionName) -> bool {
        self.steps.iter().any(|s| s.action == f.token())
    }

    pub fn sought_advice(&self) -> bool {
        self.calls(FunctionName::SeekAdvice)
    }

    pub fn reflected(&self) -> bool {
        self.calls(FunctionName::Reflection)
    }

    pub fn wrote_memory(&self) -> bool {
        self.calls(FunctionName::UpdateMemory)
    }

    /// Submitted answer graded correct.
    pub fn correct(&self) -> bool {
        self.steps
            .iter()
            .any(|s| s.action == FunctionName::SubmitAnswer.token() && s.reward == 1.0)
    }

    pub fn outcome(&self) -> SessionOutcome {
        SessionOutcome {
            sought_advice: self.sought_advice(),
            correct: self.correct(),
            reward: self.total_reward,
        }
    }

    /// Question text, read back from the `[GetQuestion]` segment.
    pub fn question_text(&self) -> Option<&[Token]> {
        let step = self
            .steps
            .iter()
            .find(|s| s.action == FunctionName::GetQuestion.token())?;
        let body = &step.emitted[1..];
        let end = body.iter().position(|&t| t == Token::SEP).unwrap_or(body.len());
        Some(&body[..end])
    }

    /// Whether the total is one of the attainable values `{0, 1, 1 - c}`.
    pub fn reward_in_support(&self, advice_cost: f64) -> bool {
        let r = self.total_reward;
        r == 0.0 || r == 1.0 || r == 1.0 - advice_cost
    }

    /// Session compiled as its own sequence, positions rebased so the
    /// session's first token sits right after BOS.
    pub fn training_sequence(&self) -> Result<TrainingSequence, TrajectoryError> {
        let rebased: Vec<StepRecord> = self
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let context = s
                    .context
                    .iter()
                    .map(|&p| match p {
                        BOS_POSITION => Ok(BOS_POSITION),
                        p if p >= self.stream_offset => Ok(p - self.stream_offset + 1),
                        p => Err(TrajectoryError::ReplayMismatch {
                            step: i,
                            reason: format!("context position {p} precedes the session"),
                        }),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(StepRecord {
                    context,
                    ..s.clone()
                })
            })
            .collect::<Result<_, TrajectoryError>>()?;
        derive_training_sequence(&rebased)
    }
}

/// `[BOS] e_1 .. e_n` with the position of each action token and the
/// positions visible when it was predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub tokens: Vec<Token>,
    pub action_positions: Vec<usize>,
    pub masks: Vec<Vec<usize>>,
}

impl TrainingSequence {
    /// `e_1 .. e_n` without the root BOS.
    pub fn emitted(&self) -> &[Token] {
        &self.tokens[1..]
    }

    pub fn is_action_position(&self, pos: usize) -> bool {
        self.action_positions.binary_search(&pos).is_ok()
    }

    /// Rebuilds the step records; lossless apart from rewards.
    pub fn reconstruct_steps(&self, rewards: &[f64]) -> Vec<StepRecord> {
        self.action_positions
            .iter()
            .enumerate()
            .map(|(i, &start)| {
                let end = self
                    .action_positions
                    .get(i + 1)
                    .copied()
                    .unwrap_or(self.tokens.len());
                StepRecord {
                    action: self.tokens[start],
                    emitted: self.tokens[start..end].to_vec(),
                    context: self.masks[i].clone(),
                    reward: rewards.get(i).copied().unwrap_or(0.0),
                }
            })
            .collect()
    }
}

fn mismatch(step: usize, reason: impl Into<String>) -> TrajectoryError {
    TrajectoryError::ReplayMismatch {
        step,
        reason: reason.into(),
    }
}

/// Replays `steps` from a fresh `[BOS]` context, checking every recorded
/// context against the replay.
pub fn derive_training_sequence(steps: &[StepRecord]) -> Result<TrainingSequence, TrajectoryError> {
    let mut tokens = vec![Token::BOS];
    let mut action_positions = Vec::with_capacity(steps.len());
    let mut masks = Vec::with_capacity(steps.len());
    let mut context = vec![BOS_POSITION];
    for (i, step) in steps.iter().enumerate() {
        if step.emitted.first() != Some(&step.action) {
            return Err(mismatch(i, "first emitted token differs from the action"));
        }
        if step.context != context {
            return Err(mismatch(i, "recorded context differs from replay"));
        }
        let single = match step.action.function() {
            None => true,
            Some(f) => matches!(
                f,
                FunctionName::Reflection
                    | FunctionName::PredictAnswer
                    | FunctionName::ClearContext
                    | FunctionName::SubmitAnswer
                    | FunctionName::UpdateMemory
            ),
        };
        if single && step.emitted.len() != 1 {
            return Err(mismatch(i, "action emits no extra tokens but segment is longer"));
        }
        if step.action == Token::BOS {
            return Err(mismatch(i, "BOS is not an action"));
        }
        let start = tokens.len();
        action_positions.push(start);
        masks.push(context.clone());
        tokens.extend_from_slice(&step.emitted);
        if step.action == FunctionName::ClearContext.token() {
            context.truncate(1);
        } else {
            context.extend(start..tokens.len());
        }
    }
    Ok(TrainingSequence {
        tokens,
        action_positions,
        masks,
    })
}

/// Splits a trajectory at session boundaries: `[GetQuestion]` opens a
/// session and `[ClearContext]` closes it.
pub fn partition_sessions(traj: &Trajectory) -> Result<Vec<SessionTrajectory>, TrajectoryError> {
    let mut sessions = Vec::new();
    let mut memory_size = traj.initial_memory_size;
    let mut session_index = traj.initial_session_index;
    let mut open: Option<usize> = None;
    let mut reflected = false;
    let mut offset = 1usize;
    let mut session_offset = 1usize;
    let mut start_memory = memory_size;
    let mut decisions = traj.decisions.iter().peekable();
    for (i, step) in traj.steps.iter().enumerate() {
        let f = step.action.function();
        if open.is_none() {
            if f != Some(FunctionName::GetQuestion) {
                return Err(TrajectoryError::OutsideSession { step: i });
            }
            open = Some(i);
            reflected = false;
            session_offset = offset;
            start_memory = memory_size;
        }
        match f {
            Some(FunctionName::Reflection) => reflected = true,
            Some(FunctionName::UpdateMemory) => memory_size += 1 + usize::from(reflected),
            _ => {}
        }
        offset += step.emitted.len();
        if f == Some(FunctionName::ClearContext) {
            let start = open.take().expect("session is open");
            let steps = traj.steps[start..=i].to_vec();
            let mut own = Vec::new();
            while let Some(d) = decisions.next_if(|d| d.step <= i) {
                if d.step < start {
                    return Err(mismatch(d.step, "decision outside its session"));
                }
                own.push(DecisionRecord {
                    step: d.step - start,
                    ..d.clone()
                });
            }
            sessions.push(SessionTrajectory {
                total_reward: steps.iter().map(|s| s.reward).sum(),
                initial_state: StateDigest {
                    context: steps[0].context.clone(),
                    memory_size: start_memory,
                    session_index,
                },
                steps,
                decisions: own,
                stream_offset: session_offset,
                question: None,
                checkpoint: traj.checkpoint.clone(),
            });
            session_index += 1;
        }
    }
    if open.is_some() {
        return Err(TrajectoryError::DanglingSession);
    }
    Ok(sessions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    vocab_hash: String,
    initial_memory_size: usize,
}

/// Writes the header line and one JSON step record per line.
pub fn write_trajectory<W: Write>(
    mut w: W,
    traj: &Trajectory,
    vocab: &Vocabulary,
) -> Result<(), TrajectoryError> {
    let header = FileHeader {
        format: TRAJECTORY_FORMAT.into(),
        version: TRAJECTORY_VERSION,
        vocab_hash: vocab.manifest_hash(),
        initial_memory_size: traj.initial_memory_size,
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    writeln!(w)?;
    for step in &traj.steps {
        serde_json::to_writer(&mut w, step).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a trajectory file; `vocab`, when given, must match the header hash.
pub fn read_trajectory<R: BufRead>(
    r: R,
    vocab: Option<&Vocabulary>,
) -> Result<Trajectory, TrajectoryError> {
    let mut lines = r.lines();
    let malformed = |line: usize, reason: String| TrajectoryError::Malformed { line, reason };
    let first = lines
        .next()
        .ok_or_else(|| malformed(1, "empty file".into()))??;
    let header: FileHeader =
        serde_json::from_str(&first).map_err(|e| malformed(1, e.to_string()))?;
    if header.format != TRAJECTORY_FORMAT || header.version != TRAJECTORY_VERSION {
        return Err(malformed(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    if let Some(v) = vocab {
        let expected = v.manifest_hash();
        if expected != header.vocab_hash {
            return Err(TrajectoryError::VocabMismatch {
                found: header.vocab_hash,
                expected,
            });
        }
    }
    let mut steps = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let step: StepRecord =
            serde_json::from_str(&line).map_err(|e| malformed(n + 2, e.to_string()))?;
        if let Some(v) = vocab {
            if let Some(t) = step.emitted.iter().find(|t| !v.contains(**t)) {
                return Err(malformed(n + 2, format!("token {} not in vocabulary", t.0)));
            }
        }
        steps.push(step);
    }
    Ok(Trajectory {
        steps,
        initial_memory_size: header.initial_memory_size,
        ..Trajectory::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(name: FunctionName) -> Token {
        name.token()
    }

    /// Builds consistent records for a list of emitted segments.
    fn records(segments: &[Vec<Token>]) -> Vec<StepRecord> {
        let mut ctx = vec![BOS_POSITION];
        let mut pos = 1;
        let mut out = Vec::new();
        for seg in segments {
            out.push(StepRecord {
                action: seg[0],
                emitted: seg.clone(),
                context: ctx.clone(),
                reward: 0.0,
            });
            if seg[0] == f(FunctionName::ClearContext) {
                ctx.truncate(1);
            } else {
                ctx.extend(pos..pos + seg.len());
            }
            pos += seg.len();
        }
        out
    }

    fn session(q: u32, advice: bool) -> Vec<Vec<Token>> {
        let mut s = vec![
            vec![f(FunctionName::GetQuestion), Token(100 + q), Token::SEP, Token(40)],
            vec![f(FunctionName::RetrieveMemory), Token::NO_INFO, Token::NO_INFO],
        ];
        if advice {
            s.push(vec![f(FunctionName::SeekAdvice), Token(60), Token::SEP, Token::NO_INFO]);
            s.push(vec![f(FunctionName::UpdateMemory)]);
        } else {
            s.push(vec![f(FunctionName::PredictAnswer)]);
            s.push(vec![Token(60)]);
        }
        s.push(vec![f(FunctionName::SubmitAnswer)]);
        s.push(vec![f(FunctionName::ClearContext)]);
        s
    }

    #[test]
    fn single_content_step() {
        let steps = records(&[vec![Token(77)]]);
        let seq = derive_training_sequence(&steps).unwrap();
        assert_eq!(seq.emitted(), &[Token(77)]);
        assert_eq!(seq.action_positions, vec![1]);
        assert_eq!(seq.masks, vec![vec![BOS_POSITION]]);
    }

    #[test]
    fn clear_context_resets_mask_to_bos() {
        let mut segs = session(0, false);
        segs.push(vec![f(FunctionName::GetQuestion), Token(101), Token::SEP, Token(40)]);
        let steps = records(&segs);
        let seq = derive_training_sequence(&steps).unwrap();
        let last = seq.masks.last().unwrap();
        assert_eq!(last, &vec![BOS_POSITION]);
        // masks only ever reference earlier positions
        for (pos, mask) in seq.action_positions.iter().zip(&seq.masks) {
            assert!(mask.iter().all(|m| m < pos));
        }
        assert!(seq.action_positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tampered_records_are_rejected() {
        let mut steps = records(&session(0, true));
        steps[2].context.pop();
        assert!(matches!(
            derive_training_sequence(&steps),
            Err(TrajectoryError::ReplayMismatch { step: 2, .. })
        ));
        let mut steps = records(&session(0, true));
        steps[1].emitted[0] = Token(99);
        assert!(derive_training_sequence(&steps).is_err());
        let mut steps = records(&session(0, false));
        steps[2].emitted.push(Token(5));
        assert!(derive_training_sequence(&steps).is_err());
    }

    #[test]
    fn reconstruction_is_lossless() {
        let mut segs = session(0, true);
        segs.extend(session(1, false));
        let mut steps = records(&segs);
        for (i, s) in steps.iter_mut().enumerate() {
            s.reward = i as f64 * 0.5;
        }
        let seq = derive_training_sequence(&steps).unwrap();
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
        assert_eq!(seq.reconstruct_steps(&rewards), steps);
    }

    #[test]
    fn partition_three_sessions() {
        let mut segs = session(0, false);
        segs.extend(session(1, true));
        segs.extend(session(2, false));
        let mut steps = records(&segs);
        // rewards (1, 0.7, 0): submit of session 0 = 1; advice -0.3 and submit 1 in session 1
        steps[4].reward = 1.0;
        steps[8].reward = -0.3;
        steps[10].reward = 1.0;
        let traj = Trajectory {
            steps: steps.clone(),
            ..Trajectory::default()
        };
        let sessions = partition_sessions(&traj).unwrap();
        assert_eq!(sessions.len(), 3);
        let idx: Vec<u64> = sessions.iter().map(|s| s.initial_state.session_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        let totals: Vec<f64> = sessions.iter().map(|s| s.total_reward).collect();
        assert_eq!(totals, vec![1.0, 0.7, 0.0]);
        let mem: Vec<usize> = sessions.iter().map(|s| s.initial_state.memory_size).collect();
        assert_eq!(mem, vec![0, 0, 1]);
        assert!(mem.windows(2).all(|w| w[0] <= w[1]));
        let joined: Vec<StepRecord> = sessions.iter().flat_map(|s| s.steps.clone()).collect();
        assert_eq!(joined, steps);
        assert_eq!(sessions[1].question_text(), Some(&[Token(101)][..]));
        assert!(sessions[1].sought_advice() && sessions[1].correct());
        for s in &sessions {
            let seq = s.training_sequence().unwrap();
            assert_eq!(seq.masks[0], vec![BOS_POSITION]);
            assert_eq!(seq.emitted().len(), s.steps.iter().map(|x| x.emitted.len()).sum::<usize>());
        }
    }

    #[test]
    fn dangling_and_orphan_steps_are_errors() {
        let mut segs = session(0, false);
        segs.pop();
        let traj = Trajectory {
            steps: records(&segs),
            ..Trajectory::default()
        };
        assert!(matches!(partition_sessions(&traj), Err(TrajectoryError::DanglingSession)));
        let traj = Trajectory {
            steps: records(&[vec![Token(70)]]),
            ..Trajectory::default()
        };
        assert!(matches!(
            partition_sessions(&traj),
            Err(TrajectoryError::OutsideSession { step: 0 })
        ));
    }

    #[test]
    fn file_round_trip_checks_vocabulary() {
        let vocab = Vocabulary::new((0..200).map(|i| format!("c{i}")));
        let traj = Trajectory {
            steps: records(&session(3, true)),
            initial_memory_size: 2,
            ..Trajectory::default()
        };
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj, &vocab).unwrap();
        let back = read_trajectory(buf.as_slice(), Some(&vocab)).unwrap();
        assert_eq!(back.steps, traj.steps);
        assert_eq!(back.initial_memory_size, 2);
        let other = Vocabulary::new(["x"]);
        assert!(matches!(
            read_trajectory(buf.as_slice(), Some(&other)),
            Err(TrajectoryError::VocabMismatch { .. })
        ));
    }
}
