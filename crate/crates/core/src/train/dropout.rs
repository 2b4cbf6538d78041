use rand::Rng;

/// Replacement for dropped sensor names.
pub const UNKNOWN_SENSOR: &str = "unknown";

/// Returns [`UNKNOWN_SENSOR`] with probability `p`, otherwise `name`.
pub fn apply_name_dropout<'a, R: Rng + ?Sized>(name: &'a str, p: f64, rng: &mut R) -> &'a str {
    if p > 0.0 && rng.random_bool(p.min(1.0)) {
        UNKNOWN_SENSOR
    } else {
        name
    }
}
