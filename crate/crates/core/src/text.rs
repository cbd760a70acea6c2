//! Text rendering helpers shared by CSV writers.

/// Formats a float for CSV output with 12 significant digits in scientific
/// notation, e.g. `1.25000000000e0`.
///
/// The rendering is locale-independent and platform-stable, so files built
/// from the same numbers are byte-identical everywhere. Negative zero is
/// normalised to zero first.
pub fn csv_float(value: f64) -> String {
    let v = if value == 0.0 { 0.0 } else { value };
    format!("{v:.11e}")
}
