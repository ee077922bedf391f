//! In-process message passing between neighbouring subsystem workers.
//!
//! Worker `i` sends `eta_bar_i` forward to `i + 1` and `eps_bar_i` backward
//! to `i - 1`. With a delay of `d` control steps a receiver only sees the
//! final messages of step `t - d` (zeros before any exist).

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    EtaBar,
    EpsBar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: usize,
    pub iteration: usize,
    pub payload: DVector<f64>,
}

#[derive(Debug, Clone, Default)]
struct Mailbox {
    /// Indexed by sender.
    eta_bar: Vec<Option<DVector<f64>>>,
    eps_bar: Vec<Option<DVector<f64>>>,
}

impl Mailbox {
    fn new(n: usize) -> Self {
        Self { eta_bar: vec![None; n], eps_bar: vec![None; n] }
    }
}

#[derive(Debug, Clone)]
pub struct MessageBus {
    n: usize,
    horizon: usize,
    delay: usize,
    latest: Mailbox,
    /// Final mailboxes of earlier control steps, newest at the back.
    history: VecDeque<Mailbox>,
    sent: usize,
    sent_this_step: usize,
}

impl MessageBus {
    pub fn new(n: usize, horizon: usize, delay: usize) -> Self {
        Self {
            n,
            horizon,
            delay,
            latest: Mailbox::new(n),
            history: VecDeque::new(),
            sent: 0,
            sent_this_step: 0,
        }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn post(&mut self, msg: Message) -> Result<()> {
        if msg.payload.len() != self.horizon {
            return dim_err(format!("message payload of length {} (horizon {})", msg.payload.len(), self.horizon));
        }
        let valid = match msg.kind {
            MessageKind::EtaBar => msg.sender + 1 < self.n,
            MessageKind::EpsBar => msg.sender >= 1 && msg.sender < self.n,
        };
        if !valid {
            return dim_err(format!("{:?} from worker {} has no receiver", msg.kind, msg.sender));
        }
        let slot = match msg.kind {
            MessageKind::EtaBar => &mut self.latest.eta_bar[msg.sender],
            MessageKind::EpsBar => &mut self.latest.eps_bar[msg.sender],
        };
        *slot = Some(msg.payload);
        self.sent += 1;
        self.sent_this_step += 1;
        Ok(())
    }

    fn visible(&self) -> Option<&Mailbox> {
        if self.delay == 0 {
            Some(&self.latest)
        } else if self.history.len() >= self.delay {
            self.history.get(self.history.len() - self.delay)
        } else {
            None
        }
    }

    /// `eta_bar` of the worker ahead of `receiver` as currently visible.
    pub fn eta_bar_for(&self, receiver: usize) -> DVector<f64> {
        receiver
            .checked_sub(1)
            .and_then(|s| self.visible().and_then(|m| m.eta_bar[s].clone()))
            .unwrap_or_else(|| DVector::zeros(self.horizon))
    }

    /// `eps_bar` of the worker behind `receiver` as currently visible.
    pub fn eps_bar_for(&self, receiver: usize) -> DVector<f64> {
        let s = receiver + 1;
        if s >= self.n {
            return DVector::zeros(self.horizon);
        }
        self.visible().and_then(|m| m.eps_bar[s].clone()).unwrap_or_else(|| DVector::zeros(self.horizon))
    }

    /// Archives this step's final messages.
    pub fn end_step(&mut self) {
        if self.delay > 0 {
            self.history.push_back(self.latest.clone());
            while self.history.len() > self.delay {
                self.history.pop_front();
            }
        }
        self.sent_this_step = 0;
    }

    pub fn messages_sent(&self) -> usize {
        self.sent
    }

    pub fn messages_this_step(&self) -> usize {
        self.sent_this_step
    }
}
