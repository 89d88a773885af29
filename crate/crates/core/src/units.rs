//! Byte-size constants and human-readable size parsing for config files.
//!
//! Decimal suffixes (`KB`, `MB`, `GB`, `TB`) are powers of 1000, binary
//! suffixes (`KiB`, `MiB`, `GiB`, `TiB`) powers of 1024. A trailing `/s` is
//! accepted so bandwidths read naturally (`"12.5MB/s"`). Bare integers are
//! bytes.

use serde::{Deserialize, Deserializer};

pub const KB: u64 = 1_000;
pub const MB: u64 = 1_000_000;
pub const GB: u64 = 1_000_000_000;

pub fn parse_size(input: &str) -> Result<u64, String> {
    let s = input.trim();
    let s = s.strip_suffix("/s").unwrap_or(s).trim_end();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    let (num, unit) = (s[..split].trim(), s[split..].trim());
    let factor: u64 = match unit {
        "" | "B" => 1,
        "KB" | "kB" => KB,
        "MB" => MB,
        "GB" => GB,
        "TB" => 1000 * GB,
        "KiB" => 1 << 10,
        "MiB" => 1 << 20,
        "GiB" => 1 << 30,
        "TiB" => 1 << 40,
        _ => return Err(format!("unknown size unit {unit:?} in {input:?}")),
    };
    if num.is_empty() {
        return Err(format!("missing number in size {input:?}"));
    }
    if let Ok(n) = num.parse::<u64>() {
        return n
            .checked_mul(factor)
            .ok_or_else(|| format!("size {input:?} overflows"));
    }
    let x: f64 = num.parse().map_err(|_| format!("bad number in size {input:?}"))?;
    let bytes = (x * factor as f64).round();
    if !bytes.is_finite() || bytes < 0.0 || bytes > u64::MAX as f64 {
        return Err(format!("size {input:?} out of range"));
    }
    Ok(bytes as u64)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawSize {
    Int(u64),
    Text(String),
}

/// Serde adapter: accepts an integer byte count or a string with a unit.
pub fn de_size<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    match RawSize::deserialize(d)? {
        RawSize::Int(n) => Ok(n),
        RawSize::Text(s) => parse_size(&s).map_err(serde::de::Error::custom),
    }
}

pub fn de_size_opt<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
    match Option::<RawSize>::deserialize(d)? {
        None => Ok(None),
        Some(RawSize::Int(n)) => Ok(Some(n)),
        Some(RawSize::Text(s)) => parse_size(&s).map(Some).map_err(serde::de::Error::custom),
    }
}

pub fn de_size_vec<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
    Vec::<RawSize>::deserialize(d)?
        .into_iter()
        .map(|r| match r {
            RawSize::Int(n) => Ok(n),
            RawSize::Text(s) => parse_size(&s).map_err(serde::de::Error::custom),
        })
        .collect()
}
