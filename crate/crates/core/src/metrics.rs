//! Code overlap, bit rate, speaker-similarity and content proxies, and the
//! code-map rendering.

use std::fmt::Write as _;
use std::io::{self, Write};

use ndarray::Axis;

use crate::autodiff::Tensor;
use crate::codebook::UtilizationReport;
use crate::corpus::SpeakerSpec;
use crate::model::{stt_stack, ModelError, ModelState};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("bit rate needs K >= 2, got {0}")]
    TooFewCodes(usize),
    #[error("empty sequence")]
    Empty,
}

/// Fraction of frames whose code indices agree.
pub fn code_overlap(a: &[usize], b: &[usize]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitRate {
    pub fixed_bits_per_frame: u32,
    pub fixed_bps: f64,
    pub entropy_bits_per_frame: f64,
    pub entropy_bps: f64,
}

/// Fixed-width rate `fps·⌈log2 K⌉` and the empirical-entropy rate of the
/// given code distribution (uniform when `None`).
pub fn bit_rate(
    k: usize,
    fps: f64,
    usage: Option<&UtilizationReport>,
) -> Result<BitRate, MetricError> {
    if k < 2 {
        return Err(MetricError::TooFewCodes(k));
    }
    // ⌈log2 K⌉ by integer arithmetic; float log2 can misround powers of two
    let fixed = usize::BITS - (k - 1).leading_zeros();
    let entropy = match usage {
        Some(u) => u.entropy_nats() / std::f64::consts::LN_2,
        None => (k as f64).log2(),
    };
    Ok(BitRate {
        fixed_bits_per_frame: fixed,
        fixed_bps: fps * fixed as f64,
        entropy_bits_per_frame: entropy,
        entropy_bps: fps * entropy,
    })
}

/// Per-dimension frame mean and population variance.
pub fn acoustic_stats(y: &Tensor) -> (ndarray::Array1<f64>, ndarray::Array1<f64>) {
    let mean = y
        .mean_axis(Axis(0))
        .unwrap_or_else(|| ndarray::Array1::zeros(y.ncols()));
    let var = y.var_axis(Axis(0), 0.0);
    (mean, var)
}

/// Euclidean distance between the utterance statistics of `y` and the
/// statistics the speaker's voice implies.
pub fn speaker_distance(y: &Tensor, spec: &SpeakerSpec) -> f64 {
    let (m, v) = acoustic_stats(y);
    let (em, ev) = spec.expected_stats();
    ((&m - &em).mapv(|d| d * d).sum() + (&v - &ev).mapv(|d| d * d).sum()).sqrt()
}

/// Frame-level symbol error rate.
pub fn content_error(predicted: &[usize], reference: &[usize]) -> Result<f64, MetricError> {
    code_overlap(predicted, reference).map(|o| 1.0 - o)
}

/// Per-frame argmax of the speech-to-text stack, the model's own recognizer.
pub fn recognize(
    y: &Tensor,
    speaker: Option<usize>,
    m: &ModelState,
) -> Result<Vec<usize>, ModelError> {
    let p = stt_stack(y, speaker, m)?;
    Ok(p.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

pub fn write_histogram_csv<W: Write>(w: &mut W, report: &UtilizationReport) -> io::Result<()> {
    writeln!(w, "code_id,count")?;
    for (k, c) in report.histogram.iter().enumerate() {
        writeln!(w, "{k},{c}")?;
    }
    Ok(())
}

pub fn write_overlap_csv<W: Write>(w: &mut W, rows: &[(usize, f64)]) -> io::Result<()> {
    writeln!(w, "utterance_id,overlap")?;
    for (id, o) in rows {
        writeln!(w, "{id},{o:?}")?;
    }
    Ok(())
}

fn code_colour(k: usize, n: usize) -> String {
    let hue = (k * 360) / n.max(1);
    format!("hsl({hue},55%,60%)")
}

/// Two-row raster of text-encoded (top) and speech-encoded (bottom) code
/// indices, one column per frame; agreeing frames are outlined.
pub fn codemap_svg(text: &[usize], speech: &[usize], k: usize) -> Result<String, MetricError> {
    if text.len() != speech.len() {
        return Err(MetricError::Length(text.len(), speech.len()));
    }
    let (cell, pad, label) = (12usize, 4usize, 56usize);
    let width = label + text.len() * cell + pad;
    let height = 2 * cell + 3 * pad;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="9">"#
    );
    let _ = writeln!(s, r#"<text x="2" y="{}">text</text>"#, pad + cell - 2);
    let _ = writeln!(
        s,
        r#"<text x="2" y="{}">speech</text>"#,
        2 * pad + 2 * cell - 2
    );
    for (t, (&a, &b)) in text.iter().zip(speech).enumerate() {
        let x = label + t * cell;
        for (row, code) in [(0, a), (1, b)] {
            let y = pad + row * (cell + pad);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}"><title>frame {t} code {code}</title></rect>"#,
                code_colour(code, k)
            );
        }
        if a == b {
            let _ = writeln!(
                s,
                r#"<rect class="overlap" x="{x}" y="{pad}" width="{cell}" height="{}" fill="none" stroke="black" stroke-width="2"/>"#,
                2 * cell + pad
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::usage_stats;
    use crate::corpus::{Corpus, CorpusConfig};

    #[test]
    fn overlap_cases() {
        assert_eq!(code_overlap(&[1, 2, 3], &[1, 2, 3]), Ok(1.0));
        assert_eq!(code_overlap(&[1, 2], &[3, 4]), Ok(0.0));
        assert_eq!(code_overlap(&[1, 2, 3, 4], &[1, 9, 3, 9]), Ok(0.5));
        assert_eq!(code_overlap(&[1], &[1, 2]), Err(MetricError::Length(1, 2)));
    }

    #[test]
    fn bit_rate_cases() {
        let r = bit_rate(160, 100.0, None).unwrap();
        assert_eq!(r.fixed_bits_per_frame, 8);
        assert_eq!(r.fixed_bps, 800.0);
        assert!(r.entropy_bps <= r.fixed_bps);
        assert_eq!(bit_rate(2, 1.0, None).unwrap().fixed_bits_per_frame, 1);
        assert_eq!(bit_rate(256, 1.0, None).unwrap().fixed_bits_per_frame, 8);
        assert_eq!(bit_rate(257, 1.0, None).unwrap().fixed_bits_per_frame, 9);
        let single = usage_stats([&[3usize, 3, 3][..]], 160).unwrap();
        assert_eq!(bit_rate(160, 50.0, Some(&single)).unwrap().entropy_bps, 0.0);
        assert!(matches!(
            bit_rate(1, 1.0, None),
            Err(MetricError::TooFewCodes(1))
        ));
    }

    #[test]
    fn content_error_cases() {
        assert_eq!(content_error(&[1, 2, 3], &[1, 2, 3]), Ok(0.0));
        assert_eq!(content_error(&[0, 0, 0, 0], &[0, 1, 2, 3]), Ok(0.75));
    }

    #[test]
    fn own_rendering_is_closest() {
        let c = Corpus::generate(&CorpusConfig {
            noise: 0.0,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        // a long uniform-cycling sequence so the empirical stats approach
        // the analytic ones
        let x: Vec<usize> = (0..1200).map(|t| t % 12).collect();
        for a in &c.speakers {
            let y = a.render_clean(&x);
            let own = speaker_distance(&y, a);
            assert!(own < 1e-9, "{own}");
            for b in &c.speakers {
                if b.id != a.id {
                    assert!(speaker_distance(&y, b) > own);
                }
            }
        }
    }

    #[test]
    fn distance_grows_with_gain_perturbation() {
        let c = Corpus::generate(&CorpusConfig {
            noise: 0.0,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let spec = &c.speakers[0];
        let x: Vec<usize> = (0..240).map(|t| t % 12).collect();
        let mut last = -1.0;
        for step in 0..5 {
            let mut s = spec.clone();
            s.gain.mapv_inplace(|g| g * (1.0 + 0.1 * step as f64));
            let d = speaker_distance(&s.render_clean(&x), spec);
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn codemap_marks_overlap() {
        let svg = codemap_svg(&[1, 2, 3, 4], &[1, 9, 3, 9], 160).unwrap();
        assert_eq!(svg.matches(r#"class="overlap""#).count(), 2);
        assert!(svg.starts_with("<svg"));
        assert!(codemap_svg(&[1], &[], 160).is_err());
    }
}
