//! Decimal rendering with nine significant digits (enough to round-trip any
//! `f32`), used by every text artifact.

pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "Infinity".into() } else { "-Infinity".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let sign = if negative { "-" } else { "" };
    if (-5..9).contains(&exp) {
        let body = if exp >= 0 {
            let split = exp as usize + 1;
            format!("{}.{}", &digits[..split], &digits[split..])
        } else {
            format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
        };
        format!("{sign}{}", trim_fraction(&body))
    } else {
        let m = trim_fraction(&format!("{}.{}", &digits[..1], &digits[1..]));
        format!("{sign}{m}e{exp}")
    }
}

fn trim_fraction(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// `[a,b,c]` with each entry rendered by [`sig9`].
pub fn sig9_array(values: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = values.into_iter().map(sig9).collect();
    format!("[{}]", parts.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn renders_plain_decimals() {
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(-2.5), "-2.5");
        assert_eq!(sig9(0.1), "0.1");
        assert_eq!(sig9(123456789.0), "123456789");
        assert_eq!(sig9(1.0e-7), "1e-7");
        assert_eq!(sig9(1.25e10), "1.25e10");
        assert_eq!(sig9(0.000123), "0.000123");
        assert_eq!(sig9(2.0f64 / 3.0), "0.666666667");
    }

    proptest! {
        #[test]
        fn f32_round_trips(x in any::<f32>().prop_filter("finite", |v| v.is_finite())) {
            let s = sig9(x as f64);
            let back: f32 = s.parse().unwrap();
            prop_assert_eq!(back.to_bits(), if x == 0.0 { 0.0f32.to_bits() } else { x.to_bits() });
        }
    }
}
