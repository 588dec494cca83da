use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Token bucket shared by all threads calling one endpoint.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let requests = requests.max(1) as f64;
        RateLimiter {
            capacity: requests.clamp(1.0, 10.0),
            refill_per_sec: requests / 60.0,
            state: Mutex::new((requests.clamp(1.0, 10.0), Instant::now())),
        }
    }

    /// Time until a token is available, taking it if one is available now.
    fn try_take(&self) -> Option<Duration> {
        let mut state = self.state.lock().unwrap();
        let (ref mut tokens, ref mut last) = *state;
        let now = Instant::now();
        *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.refill_per_sec).min(self.capacity);
        *last = now;
        if *tokens >= 1.0 {
            *tokens -= 1.0;
            None
        } else {
            Some(Duration::from_secs_f64((1.0 - *tokens) / self.refill_per_sec))
        }
    }

    pub fn acquire(&self) {
        while let Some(wait) = self.try_take() {
            std::thread::sleep(wait);
        }
    }
}
