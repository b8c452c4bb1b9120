//! Depth-1 latest-wins slot between a producer and one consumer.

use std::sync::Mutex;

use tokio::sync::Notify;

struct State<T> {
    value: Option<T>,
    closed: bool,
    replaced: u64,
}

pub struct Mailbox<T> {
    state: Mutex<State<T>>,
    notify: Notify,
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Self {
            state: Mutex::new(State {
                value: None,
                closed: false,
                replaced: 0,
            }),
            notify: Notify::new(),
        }
    }
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `value`, dropping any value not yet taken. Returns whether one was dropped.
    pub fn put(&self, value: T) -> bool {
        let dropped = {
            let mut s = self.state.lock().expect("mailbox lock");
            let dropped = s.value.replace(value).is_some();
            s.replaced += u64::from(dropped);
            dropped
        };
        self.notify.notify_one();
        dropped
    }

    /// After closing, `take` drains the pending value and then yields `None`.
    pub fn close(&self) {
        self.state.lock().expect("mailbox lock").closed = true;
        self.notify.notify_one();
    }

    /// Values overwritten before being taken.
    pub fn dropped(&self) -> u64 {
        self.state.lock().expect("mailbox lock").replaced
    }

    pub fn try_take(&self) -> Option<T> {
        self.state.lock().expect("mailbox lock").value.take()
    }

    pub async fn take(&self) -> Option<T> {
        loop {
            {
                let mut s = self.state.lock().expect("mailbox lock");
                if let Some(v) = s.value.take() {
                    return Some(v);
                }
                if s.closed {
                    return None;
                }
            }
            self.notify.notified().await;
        }
    }
}
