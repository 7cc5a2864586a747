use std::time::Duration;

/// Fixed-attempt retry with exponential backoff (1s, 2s, 4s, ... by default).
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; used by mocks and tests.
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            initial_backoff: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds or attempts run out; returns the last error.
    pub fn run<T, E: std::fmt::Display>(&self, mut op: impl FnMut(u32) -> Result<T, E>) -> Result<T, E> {
        let attempts = self.attempts.max(1);
        let mut backoff = self.initial_backoff;
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt + 1 < attempts => {
                    log::warn!("attempt {} of {} failed: {e}", attempt + 1, attempts);
                    if !backoff.is_zero() {
                        std::thread::sleep(backoff);
                    }
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retries_then_gives_up() {
        let mut calls = 0;
        let r: Result<(), String> = RetryPolicy::immediate(3).run(|_| {
            calls += 1;
            Err("boom".into())
        });
        assert!(r.is_err());
        assert_eq!(calls, 3);

        let mut calls = 0;
        let r: Result<u32, String> = RetryPolicy::immediate(3).run(|a| {
            calls += 1;
            if a < 1 { Err("once".into()) } else { Ok(a) }
        });
        assert_eq!(r, Ok(1));
        assert_eq!(calls, 2);
    }
}
