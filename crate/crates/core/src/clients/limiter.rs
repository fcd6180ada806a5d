//! Per-endpoint admission control: a cap on in-flight requests plus an
//! optional token bucket on the request rate.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug)]
struct State {
    in_flight: usize,
    tokens: f64,
    last: Instant,
}

#[derive(Debug)]
pub struct Limiter {
    max_in_flight: usize,
    rate: f64,
    burst: f64,
    state: Mutex<State>,
    cv: Condvar,
}

/// Releases its in-flight slot on drop.
pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.limiter.state.lock().expect("limiter lock poisoned");
        s.in_flight -= 1;
        self.limiter.cv.notify_one();
    }
}

impl Limiter {
    /// `rate_per_sec == 0` disables the token bucket. The bucket holds at
    /// most `max(1, rate)` tokens.
    pub fn new(max_in_flight: usize, rate_per_sec: f64) -> Self {
        let burst = rate_per_sec.max(1.0);
        Self {
            max_in_flight: max_in_flight.max(1),
            rate: rate_per_sec,
            burst,
            state: Mutex::new(State {
                in_flight: 0,
                tokens: burst,
                last: Instant::now(),
            }),
            cv: Condvar::new(),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().expect("limiter lock poisoned").in_flight
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut s = self.state.lock().expect("limiter lock poisoned");
        loop {
            if self.rate > 0.0 {
                let now = Instant::now();
                let dt = now.duration_since(s.last).as_secs_f64();
                s.tokens = (s.tokens + dt * self.rate).min(self.burst);
                s.last = now;
            }
            let has_token = self.rate <= 0.0 || s.tokens >= 1.0;
            if s.in_flight < self.max_in_flight && has_token {
                s.in_flight += 1;
                if self.rate > 0.0 {
                    s.tokens -= 1.0;
                }
                return Permit { limiter: self };
            }
            let wait = if has_token {
                Duration::from_millis(50)
            } else {
                Duration::from_secs_f64((1.0 - s.tokens) / self.rate)
            };
            s = self.cv.wait_timeout(s, wait).expect("limiter lock poisoned").0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn bounds_in_flight() {
        let lim = Arc::new(Limiter::new(2, 0.0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let lim = lim.clone();
                let peak = peak.clone();
                std::thread::spawn(move || {
                    let _p = lim.acquire();
                    peak.fetch_max(lim.in_flight(), Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(20));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(lim.in_flight(), 0);
    }

    #[test]
    fn rate_limits() {
        let lim = Limiter::new(8, 20.0);
        let start = Instant::now();
        for _ in 0..30 {
            drop(lim.acquire());
        }
        // 20 burst tokens, then 10 more at 20/s.
        assert!(start.elapsed() >= Duration::from_millis(400), "{:?}", start.elapsed());
    }
}
