//! Session lifecycle states and the legal transitions between them.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureReason {
    InsufficientClients,
    Interrupted,
    Stopped,
    Internal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Created,
    WaitingForClients,
    InRound { round: u64 },
    Aggregating { round: u64 },
    Completed,
    Failed { reason: FailureReason },
}

impl SessionState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, SessionState::Completed | SessionState::Failed { .. })
    }

    /// Accepting or serving clients.
    pub fn is_live(&self) -> bool {
        matches!(
            self,
            SessionState::WaitingForClients | SessionState::InRound { .. }
        )
    }

    pub fn round(&self) -> Option<u64> {
        match self {
            SessionState::InRound { round } | SessionState::Aggregating { round } => Some(*round),
            _ => None,
        }
    }
}

/// Whether `from -> to` is an allowed edge.
pub fn can_transition(from: SessionState, to: SessionState) -> bool {
    use SessionState::*;
    if from.is_terminal() {
        return false;
    }
    match (from, to) {
        (_, Failed { .. }) => true,
        (Created, WaitingForClients) => true,
        (WaitingForClients, InRound { round }) => round == 1,
        (InRound { round: a }, Aggregating { round: b }) => a == b,
        (Aggregating { round: a }, InRound { round: b }) => b == a + 1,
        (Aggregating { .. }, Completed) => true,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition {from:?} -> {to:?}")]
pub struct IllegalTransition {
    pub from: SessionState,
    pub to: SessionState,
}

/// Current state plus every state visited, in order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateMachine {
    history: Vec<SessionState>,
}

impl Default for StateMachine {
    fn default() -> Self {
        StateMachine {
            history: vec![SessionState::Created],
        }
    }
}

impl StateMachine {
    pub fn current(&self) -> SessionState {
        *self.history.last().expect("history is never empty")
    }

    pub fn history(&self) -> &[SessionState] {
        &self.history
    }

    pub fn advance(&mut self, to: SessionState) -> Result<(), IllegalTransition> {
        let from = self.current();
        if !can_transition(from, to) {
            return Err(IllegalTransition { from, to });
        }
        self.history.push(to);
        Ok(())
    }
}

/// Checks a recorded history: starts at Created, every step legal.
pub fn is_legal_history(history: &[SessionState]) -> bool {
    history.first() == Some(&SessionState::Created)
        && history.windows(2).all(|w| can_transition(w[0], w[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SessionState::*;

    #[test]
    fn happy_path() {
        let mut sm = StateMachine::default();
        for s in [
            WaitingForClients,
            InRound { round: 1 },
            Aggregating { round: 1 },
            InRound { round: 2 },
            Aggregating { round: 2 },
            Completed,
        ] {
            sm.advance(s).unwrap();
        }
        assert!(is_legal_history(sm.history()));
        assert!(sm
            .advance(Failed {
                reason: FailureReason::Stopped
            })
            .is_err());
    }

    #[test]
    fn rejects_skips_and_rewinds() {
        assert!(!can_transition(Created, InRound { round: 1 }));
        assert!(!can_transition(WaitingForClients, InRound { round: 2 }));
        assert!(!can_transition(
            Aggregating { round: 2 },
            InRound { round: 2 }
        ));
        assert!(!can_transition(InRound { round: 1 }, Completed));
        assert!(!can_transition(Completed, Completed));
        assert!(can_transition(
            InRound { round: 3 },
            Failed {
                reason: FailureReason::InsufficientClients
            }
        ));
    }

    #[test]
    fn serde_shape() {
        assert_eq!(
            serde_json::to_string(&InRound { round: 3 }).unwrap(),
            r#"{"InRound":{"round":3}}"#
        );
        assert_eq!(
            serde_json::to_string(&WaitingForClients).unwrap(),
            r#""WaitingForClients""#
        );
        assert_eq!(
            serde_json::to_string(&Failed {
                reason: FailureReason::Interrupted
            })
            .unwrap(),
            r#"{"Failed":{"reason":"Interrupted"}}"#
        );
    }

    fn any_state() -> impl Strategy<Value = SessionState> {
        prop_oneof![
            Just(Created),
            Just(WaitingForClients),
            (0u64..6).prop_map(|round| InRound { round }),
            (0u64..6).prop_map(|round| Aggregating { round }),
            Just(Completed),
            Just(Failed {
                reason: FailureReason::Stopped
            }),
        ]
    }

    proptest! {
        #[test]
        fn accepted_histories_are_legal_and_rounds_increase(steps in prop::collection::vec(any_state(), 0..40)) {
            let mut sm = StateMachine::default();
            for s in steps {
                let _ = sm.advance(s);
            }
            prop_assert!(is_legal_history(sm.history()));
            let rounds: Vec<u64> = sm.history().iter().filter_map(|s| match s { InRound { round } => Some(*round), _ => None }).collect();
            prop_assert!(rounds.windows(2).all(|w| w[1] > w[0]));
            let terminal = sm.history().iter().position(|s| s.is_terminal());
            if let Some(t) = terminal {
                prop_assert_eq!(t, sm.history().len() - 1);
            }
        }
    }
}
