use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::clock::Clock;

const WINDOW: Duration = Duration::from_secs(60);

/// Sliding-window limiter: at most `per_minute` grants in any 60 s window.
///
/// The lock is held while waiting, so waiters are served one at a time and
/// the window bookkeeping never races.
pub struct RateLimiter {
    per_minute: usize,
    grants: Mutex<VecDeque<Duration>>,
    clock: Arc<dyn Clock>,
}

impl RateLimiter {
    pub fn new(per_minute: u32, clock: Arc<dyn Clock>) -> Self {
        Self {
            per_minute: per_minute.max(1) as usize,
            grants: Mutex::new(VecDeque::new()),
            clock,
        }
    }

    /// Blocks until a slot is free and returns the grant time.
    pub fn acquire(&self) -> Duration {
        let mut grants = self.grants.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            let now = self.clock.now();
            while let Some(&oldest) = grants.front() {
                if now >= oldest + WINDOW {
                    grants.pop_front();
                } else {
                    break;
                }
            }
            if grants.len() < self.per_minute {
                grants.push_back(now);
                return now;
            }
            let oldest = *grants.front().expect("window is full");
            self.clock.sleep(oldest + WINDOW - now);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::clock::FakeClock;

    #[test]
    fn waits_for_the_window_to_slide() {
        let clock = Arc::new(FakeClock::new());
        let limiter = RateLimiter::new(2, clock.clone());
        assert_eq!(limiter.acquire(), Duration::ZERO);
        clock.advance(Duration::from_secs(10));
        assert_eq!(limiter.acquire(), Duration::from_secs(10));
        assert_eq!(limiter.acquire(), Duration::from_secs(60));
        assert_eq!(limiter.acquire(), Duration::from_secs(70));
    }
}
