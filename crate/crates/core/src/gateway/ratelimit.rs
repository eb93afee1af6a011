use std::collections::VecDeque;
use std::time::Duration;

use tokio::sync::Mutex;
use tokio::time::Instant;

/// Sliding-window limiter: at most `capacity` acquisitions in any window.
///
/// The window carries a small guard so that transport jitter cannot squeeze
/// an extra request into a one-second window observed at the server.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    issued: Mutex<VecDeque<Instant>>,
}

const GUARD: Duration = Duration::from_millis(25);

impl RateLimiter {
    /// Limit to `per_second` requests per second. Fractional rates below one
    /// become one request per `1 / per_second` seconds.
    pub fn per_second(per_second: f64) -> Self {
        assert!(per_second > 0.0, "rate limit must be positive");
        let (capacity, window) = if per_second >= 1.0 {
            (per_second.floor() as usize, Duration::from_secs(1))
        } else {
            (1, Duration::from_secs_f64(1.0 / per_second))
        };
        RateLimiter {
            capacity,
            window: window + GUARD,
            issued: Mutex::new(VecDeque::with_capacity(capacity)),
        }
    }

    /// Wait until a request may be issued. Waiters are served in FIFO order.
    pub async fn acquire(&self) {
        let mut issued = self.issued.lock().await;
        loop {
            let now = Instant::now();
            while issued.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                issued.pop_front();
            }
            if issued.len() < self.capacity {
                issued.push_back(now);
                return;
            }
            let oldest = *issued.front().expect("window is full");
            tokio::time::sleep_until(oldest + self.window).await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test(start_paused = true)]
    async fn never_exceeds_capacity_in_a_window() {
        let limiter = RateLimiter::per_second(4.0);
        let start = Instant::now();
        let mut stamps = Vec::new();
        for _ in 0..12 {
            limiter.acquire().await;
            stamps.push(start.elapsed());
        }
        for (i, t) in stamps.iter().enumerate() {
            let in_window = stamps[i..]
                .iter()
                .filter(|u| u.saturating_sub(*t) < Duration::from_secs(1))
                .count();
            assert!(in_window <= 4, "{in_window} requests within 1s of {t:?}");
        }
        assert!(stamps[11] >= Duration::from_secs(2));
    }
}
