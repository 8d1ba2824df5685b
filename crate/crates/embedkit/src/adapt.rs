//! Encoder input adapters: first-layer channel expansion by cyclic weight
//! tiling, and the geospatial caption string formatters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{self, SampleMetadata};

/// A conv weight tensor in (out, in, kh, kw) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeight {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ConvHeader {
    kind: String,
    dims: [usize; 4],
}

impl ConvWeight {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = out_channels
            .checked_mul(in_channels)
            .and_then(|v| v.checked_mul(kernel_h))
            .and_then(|v| v.checked_mul(kernel_w))
            .ok_or_else(|| Error::InvalidHeader("conv dims overflow".into()))?;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            data,
        })
    }

    #[inline]
    pub fn get(&self, o: usize, c: usize, i: usize, j: usize) -> f32 {
        let idx = ((o * self.in_channels + c) * self.kernel_h + i) * self.kernel_w + j;
        self.data[idx]
    }

    /// Writes as an EMB1-style container, kind `cw4d`, with the four dims in
    /// the header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ConvHeader {
            kind: "cw4d".into(),
            dims: [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w],
        };
        let header_bytes = serde_json::to_vec(&header)?;
        store::write_container(path.as_ref(), &header_bytes, &self.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header_value, payload) = store::read_container(path.as_ref())?;
        store::expect_kind(&header_value, "cw4d")?;
        let header: ConvHeader = serde_json::from_value(header_value)
            .map_err(|e| Error::InvalidHeader(e.to_string()))?;
        let [o, c, h, w] = header.dims;
        Self::new(o, c, h, w, payload)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// Raw tiling; duplicated channels keep the original values bit-exactly.
    None,
    /// All values scaled by in_channels/target_in so a channel-constant
    /// input approximately reproduces the original pre-activation.
    PreserveSum,
}

/// Expands first-layer weights from `in_channels` to `target_in` input
/// channels: output channel `c` takes its values from source channel
/// `c mod in_channels`.
pub fn expand_first_layer_channels(
    w: &ConvWeight,
    target_in: usize,
    policy: ScalePolicy,
) -> Result<ConvWeight> {
    if target_in < w.in_channels {
        return Err(Error::OutOfRange(format!(
            "target_in {} is below the source channel count {}",
            target_in, w.in_channels
        )));
    }
    let scale = match policy {
        ScalePolicy::None => 1.0f64,
        ScalePolicy::PreserveSum => w.in_channels as f64 / target_in as f64,
    };
    let mut data =
        Vec::with_capacity(w.out_channels * target_in * w.kernel_h * w.kernel_w);
    for o in 0..w.out_channels {
        for c in 0..target_in {
            let src = c % w.in_channels;
            for i in 0..w.kernel_h {
                for j in 0..w.kernel_w {
                    let v = w.get(o, src, i, j);
                    let scaled = if policy == ScalePolicy::None {
                        v
                    } else {
                        (v as f64 * scale) as f32
                    };
                    data.push(scaled);
                }
            }
        }
    }
    ConvWeight::new(w.out_channels, target_in, w.kernel_h, w.kernel_w, data)
}

/// Worst-case relative pre-activation error of `preserve_sum` tiling on a
/// channel-constant input: exact preservation needs every source channel to
/// be replicated `target_in / in_channels` times, so non-multiple targets
/// leave `max_s |1 − scale · replication(s)|`.
pub fn preserve_sum_mismatch(in_channels: usize, target_in: usize) -> f64 {
    if in_channels == 0 || target_in == 0 {
        return 0.0;
    }
    let scale = in_channels as f64 / target_in as f64;
    (0..in_channels)
        .map(|s| {
            let replication = target_in / in_channels
                + usize::from(s < target_in % in_channels);
            (1.0 - scale * replication as f64).abs()
        })
        .fold(0.0f64, f64::max)
}

/// Caption formatting knobs. `verbatim_spelling` keeps the original template
/// spellings ("Latitute"/"Longtitute"), which is the default because the
/// produced captions should match the training captions byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionConfig {
    pub verbatim_spelling: bool,
    pub decimal_places: usize,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self {
            verbatim_spelling: true,
            decimal_places: 4,
        }
    }
}

impl CaptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decimal_places > 12 {
            return Err(Error::InvalidConfig(format!(
                "decimal_places {} exceeds 12",
                self.decimal_places
            )));
        }
        Ok(())
    }
}

/// `Latitute: {lat}, Longtitute: {lon}` (verbatim) or
/// `Latitude: {lat}, Longitude: {lon}` (corrected).
pub fn format_latlon_caption(lat: f64, lon: f64, cfg: &CaptionConfig) -> Result<String> {
    cfg.validate()?;
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::OutOfRange(format!("lat {lat}")));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(Error::OutOfRange(format!("lon {lon}")));
    }
    let lat_s = format_fixed(lat, cfg.decimal_places);
    let lon_s = format_fixed(lon, cfg.decimal_places);
    Ok(if cfg.verbatim_spelling {
        format!("Latitute: {lat_s}, Longtitute: {lon_s}")
    } else {
        format!("Latitude: {lat_s}, Longitude: {lon_s}")
    })
}

/// `Forest Cover: {x1}, Elevation: {x2}, Nightlights: {x3}, Population: {x4}`.
pub fn format_regression_caption(
    forest_cover: f64,
    elevation: f64,
    nightlights: f64,
    population: f64,
    cfg: &CaptionConfig,
) -> Result<String> {
    cfg.validate()?;
    let dp = cfg.decimal_places;
    Ok(format!(
        "Forest Cover: {}, Elevation: {}, Nightlights: {}, Population: {}",
        format_fixed(forest_cover, dp),
        format_fixed(elevation, dp),
        format_fixed(nightlights, dp),
        format_fixed(population, dp),
    ))
}

/// Caption from a metadata row; missing coordinates are an error.
pub fn latlon_caption_for(meta: &SampleMetadata, cfg: &CaptionConfig) -> Result<String> {
    let lat = meta
        .lat
        .ok_or_else(|| Error::MissingAttribute(format!("lat for sample {}", meta.sample_id)))?;
    let lon = meta
        .lon
        .ok_or_else(|| Error::MissingAttribute(format!("lon for sample {}", meta.sample_id)))?;
    format_latlon_caption(lat, lon, cfg)
}

/// Caption from a metadata row; all four attributes must be present.
pub fn regression_caption_for(meta: &SampleMetadata, cfg: &CaptionConfig) -> Result<String> {
    let field = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| Error::MissingAttribute(format!("{name} for sample {}", meta.sample_id)))
    };
    format_regression_caption(
        field(meta.forest_cover, "forest_cover")?,
        field(meta.elevation, "elevation")?,
        field(meta.nightlights, "nightlights")?,
        field(meta.population, "population")?,
        cfg,
    )
}

/// Fixed-point formatting with round-half-away-from-zero on the shortest
/// decimal representation of the value (so `1.005` at two places is "1.01",
/// not the "1.00" that bit-level rounding of the nearest double would give).
/// With zero places the output has no decimal point.
pub fn format_fixed(value: f64, decimal_places: usize) -> String {
    let repr = format!("{value}");
    round_decimal_string(&repr, decimal_places)
}

fn round_decimal_string(repr: &str, dp: usize) -> String {
    let (neg, digits) = match repr.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, repr),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i.to_string(), f.to_string()),
        None => (digits.to_string(), String::new()),
    };

    let mut frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    let mut int: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();

    if frac.len() > dp {
        let round_up = frac[dp] >= 5;
        frac.truncate(dp);
        if round_up {
            // Propagate the carry through the fraction, then the integer.
            let mut carry = 1u8;
            for digit in frac.iter_mut().rev() {
                let v = *digit + carry;
                *digit = v % 10;
                carry = v / 10;
                if carry == 0 {
                    break;
                }
            }
            if carry > 0 {
                for digit in int.iter_mut().rev() {
                    let v = *digit + carry;
                    *digit = v % 10;
                    carry = v / 10;
                    if carry == 0 {
                        break;
                    }
                }
                if carry > 0 {
                    int.insert(0, carry);
                }
            }
        }
    } else {
        frac.resize(dp, 0);
    }

    let mut out = String::new();
    let all_zero = int.iter().all(|&d| d == 0) && frac.iter().all(|&d| d == 0);
    if neg && !all_zero {
        out.push('-');
    }
    for d in &int {
        out.push((b'0' + d) as char);
    }
    if dp > 0 {
        out.push('.');
        for d in &frac {
            out.push((b'0' + d) as char);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_weight(o: usize, c: usize, h: usize, w: usize, seed: u64) -> ConvWeight {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..o * c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        ConvWeight::new(o, c, h, w, data).unwrap()
    }

    #[test]
    fn expansion_3_to_128_shape_and_tiling() {
        let w = random_weight(4, 3, 2, 2, 0);
        let out = expand_first_layer_channels(&w, 128, ScalePolicy::None).unwrap();
        assert_eq!(
            (out.out_channels, out.in_channels, out.kernel_h, out.kernel_w),
            (4, 128, 2, 2)
        );
        for o in 0..4 {
            for c in 0..128 {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(out.get(o, c, i, j), w.get(o, c % 3, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn expansion_identity_when_target_equals_source() {
        let w = random_weight(2, 3, 1, 1, 1);
        let out = expand_first_layer_channels(&w, 3, ScalePolicy::None).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn preserve_sum_exact_on_multiples() {
        // 3 -> 6 on a 1x1 kernel: a channel-constant input must produce the
        // original pre-activation. Direct convolution-sum check.
        let w = random_weight(5, 3, 1, 1, 2);
        let out = expand_first_layer_channels(&w, 6, ScalePolicy::PreserveSum).unwrap();
        let input_value = 0.7f64;
        for o in 0..5 {
            let original: f64 = (0..3).map(|c| w.get(o, c, 0, 0) as f64 * input_value).sum();
            let expanded: f64 = (0..6).map(|c| out.get(o, c, 0, 0) as f64 * input_value).sum();
            assert!(
                (original - expanded).abs() < 1e-6,
                "out {o}: {original} vs {expanded}"
            );
        }
        assert_eq!(preserve_sum_mismatch(3, 6), 0.0);
    }

    #[test]
    fn preserve_sum_mismatch_reported_for_non_multiples() {
        // 128 = 42*3 + 2: channels 0 and 1 replicate 43 times, channel 2
        // replicates 42 times; scale is 3/128.
        let bound = preserve_sum_mismatch(3, 128);
        let expected = (1.0f64 - (3.0 / 128.0) * 42.0).abs(); // 2/128
        assert!((bound - expected).abs() < 1e-15);
        assert!((bound - 0.015625).abs() < 1e-15);
    }

    #[test]
    fn expansion_rejects_shrinking() {
        let w = random_weight(1, 3, 1, 1, 3);
        assert!(matches!(
            expand_first_layer_channels(&w, 2, ScalePolicy::None).unwrap_err(),
            Error::OutOfRange(_)
        ));
    }

    #[test]
    fn conv_weight_save_load_roundtrip() {
        let w = random_weight(3, 2, 2, 4, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cw4d");
        w.save(&path).unwrap();
        let back = ConvWeight::load(&path).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn latlon_caption_verbatim_template() {
        let cfg = CaptionConfig {
            verbatim_spelling: true,
            decimal_places: 1,
        };
        let s = format_latlon_caption(47.6, -122.3, &cfg).unwrap();
        assert_eq!(s, "Latitute: 47.6, Longtitute: -122.3");
    }

    #[test]
    fn latlon_caption_corrected_template() {
        let cfg = CaptionConfig {
            verbatim_spelling: false,
            decimal_places: 0,
        };
        let s = format_latlon_caption(0.0, 0.0, &cfg).unwrap();
        assert_eq!(s, "Latitude: 0, Longitude: 0");
    }

    #[test]
    fn latlon_caption_inclusive_bounds() {
        let cfg = CaptionConfig::default();
        assert!(format_latlon_caption(90.0, 180.0, &cfg).is_ok());
        assert!(format_latlon_caption(-90.0, -180.0, &cfg).is_ok());
        assert!(format_latlon_caption(90.0001, 0.0, &cfg).is_err());
        assert!(format_latlon_caption(0.0, -180.5, &cfg).is_err());
    }

    #[test]
    fn regression_caption_template() {
        let cfg = CaptionConfig {
            verbatim_spelling: true,
            decimal_places: 0,
        };
        let s = format_regression_caption(10.0, 250.0, 3.0, 1200.0, &cfg).unwrap();
        assert_eq!(
            s,
            "Forest Cover: 10, Elevation: 250, Nightlights: 3, Population: 1200"
        );
        let zeros = format_regression_caption(0.0, 0.0, 0.0, 0.0, &cfg).unwrap();
        assert_eq!(
            zeros,
            "Forest Cover: 0, Elevation: 0, Nightlights: 0, Population: 0"
        );
    }

    #[test]
    fn fixed_point_rounds_half_away_from_zero() {
        assert_eq!(format_fixed(1.005, 2), "1.01");
        assert_eq!(format_fixed(-1.005, 2), "-1.01");
        assert_eq!(format_fixed(2.5, 0), "3");
        assert_eq!(format_fixed(-2.5, 0), "-3");
        assert_eq!(format_fixed(9.999, 2), "10.00");
        assert_eq!(format_fixed(0.0, 2), "0.00");
        assert_eq!(format_fixed(-0.001, 2), "0.00");
        assert_eq!(format_fixed(47.6, 3), "47.600");
        assert_eq!(format_fixed(123.0, 0), "123");
    }

    #[test]
    fn caption_from_metadata_reports_missing_attribute() {
        let meta = SampleMetadata {
            sample_id: "s0".into(),
            lat: Some(1.0),
            lon: None,
            forest_cover: Some(1.0),
            elevation: Some(2.0),
            nightlights: None,
            population: Some(4.0),
        };
        let cfg = CaptionConfig::default();
        assert!(matches!(
            latlon_caption_for(&meta, &cfg).unwrap_err(),
            Error::MissingAttribute(_)
        ));
        assert!(matches!(
            regression_caption_for(&meta, &cfg).unwrap_err(),
            Error::MissingAttribute(_)
        ));
    }

    #[test]
    fn caption_config_rejects_excess_precision() {
        let cfg = CaptionConfig {
            verbatim_spelling: true,
            decimal_places: 13,
        };
        assert!(matches!(cfg.validate().unwrap_err(), Error::InvalidConfig(_)));
    }
}
