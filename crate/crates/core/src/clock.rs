//! Wall-clock timing; reads zero where no clock is available (wasm32).

#[cfg(feature = "parallel")]
pub(crate) type Instant = std::time::Instant;
#[cfg(not(feature = "parallel"))]
pub(crate) type Instant = ();

#[cfg(feature = "parallel")]
pub(crate) fn now() -> Instant {
    std::time::Instant::now()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn now() -> Instant {}

#[cfg(feature = "parallel")]
pub(crate) fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn elapsed(_start: Instant) -> f64 {
    0.0
}
