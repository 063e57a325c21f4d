//! Request pacing: a token bucket for requests per minute and a counting
//! semaphore bounding concurrent backend calls.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug)]
pub struct RateLimiter {
    /// Tokens per second; `None` disables limiting.
    rate: Option<f64>,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn unlimited() -> Self {
        RateLimiter {
            rate: None,
            capacity: 0.0,
            state: Mutex::new((0.0, Instant::now())),
        }
    }

    /// Bucket holding up to one second's worth of requests (at least one).
    pub fn per_minute(requests_per_minute: f64) -> Self {
        if !(requests_per_minute > 0.0) || !requests_per_minute.is_finite() {
            return Self::unlimited();
        }
        let rate = requests_per_minute / 60.0;
        let capacity = rate.max(1.0);
        RateLimiter {
            rate: Some(rate),
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Time to wait before a token is available, consuming it if it is.
    fn try_take(&self, now: Instant) -> Option<Duration> {
        let rate = self.rate?;
        let mut st = self.state.lock().expect("rate limiter poisoned");
        let elapsed = now.saturating_duration_since(st.1).as_secs_f64();
        st.0 = (st.0 + elapsed * rate).min(self.capacity);
        st.1 = now;
        if st.0 >= 1.0 {
            st.0 -= 1.0;
            None
        } else {
            Some(Duration::from_secs_f64((1.0 - st.0) / rate))
        }
    }

    pub fn acquire(&self) {
        while let Some(wait) = self.try_take(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Slot<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        InFlightLimiter {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Slot<'_> {
        let mut used = self.used.lock().expect("in-flight limiter poisoned");
        while *used >= self.max {
            used = self.freed.wait(used).expect("in-flight limiter poisoned");
        }
        *used += 1;
        Slot { limiter: self }
    }

    pub fn in_use(&self) -> usize {
        *self.used.lock().expect("in-flight limiter poisoned")
    }
}

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        let mut used = self.limiter.used.lock().expect("in-flight limiter poisoned");
        *used -= 1;
        self.limiter.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn bucket_refills_at_rate() {
        let r = RateLimiter::per_minute(60.0);
        let t0 = Instant::now();
        assert!(r.try_take(t0).is_none());
        let wait = r.try_take(t0).unwrap();
        assert!((wait.as_secs_f64() - 1.0).abs() < 1e-6);
        assert!(r.try_take(t0 + Duration::from_millis(1001)).is_none());
    }

    #[test]
    fn unlimited_never_waits() {
        let r = RateLimiter::unlimited();
        for _ in 0..1000 {
            assert!(r.try_take(Instant::now()).is_none());
        }
        assert!(RateLimiter::per_minute(0.0).rate.is_none());
    }

    #[test]
    fn in_flight_bound_holds() {
        let lim = InFlightLimiter::new(3);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..12 {
                s.spawn(|| {
                    let _slot = lim.acquire();
                    peak.fetch_max(lim.in_use(), Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert_eq!(lim.in_use(), 0);
    }
}
