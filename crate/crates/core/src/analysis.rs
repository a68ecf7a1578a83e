//! Linear CKA between activation matrices, per-depth model comparisons and
//! input/output comparisons of single blocks.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, Vocabulary};
use crate::tensor::Tensor;
use crate::train::Example;

pub const DEFAULT_LINEARITY_THRESHOLD: f64 = 0.95;
pub const ADM_SUFFIX: &str = "-after-ADM";

fn centered(x: &Tensor) -> Result<Tensor> {
    let means = x.col_means()?;
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    Ok(out)
}

fn frobenius_sq(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum()
}

/// `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F ‖Ycᵀ Yc‖_F)` with column-centered inputs.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, _) = x.dims2()?;
    let (m, _) = y.dims2()?;
    if n != m {
        return Err(Error::Dimension(format!("CKA inputs have {n} and {m} rows")));
    }
    if n < 2 {
        return Err(Error::Input("CKA needs at least two rows".into()));
    }
    let xc = centered(x)?;
    let yc = centered(y)?;
    let xx = frobenius_sq(&xc.transpose()?.matmul(&xc)?).sqrt();
    let yy = frobenius_sq(&yc.transpose()?.matmul(&yc)?).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Degenerate("CKA input has zero variance".into()));
    }
    let xy = frobenius_sq(&yc.transpose()?.matmul(&xc)?);
    Ok(xy / (xx * yy))
}

/// Per-site activations of one model over an evaluation set, rows being
/// frames (encoder) or token positions (decoder) of all utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub tag: String,
    pub encoder_input: Tensor,
    pub encoder: Vec<(String, Tensor)>,
    pub decoder_input: Tensor,
    pub decoder: Vec<(String, Tensor)>,
}

impl ActivationDump {
    pub fn site(&self, label: &str) -> Option<&Tensor> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .find(|(l, _)| l == label)
            .map(|(_, t)| t)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.encoder.iter().chain(&self.decoder).map(|(l, _)| l.as_str())
    }
}

/// Seeded, order-preserving choice of at most `max_rows` of `total` rows.
/// Depends only on its arguments, so models dumped on the same evaluation
/// set keep the same rows.
pub fn row_subset(total: usize, max_rows: usize, seed: u64) -> Option<Vec<usize>> {
    if total <= max_rows {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, total, max_rows).into_vec();
    idx.sort_unstable();
    Some(idx)
}

fn stack(parts: &[Tensor], rows: &Option<Vec<usize>>) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    let all = Tensor::vstack(&refs)?;
    match rows {
        Some(idx) => all.select_rows(idx),
        None => Ok(all),
    }
}

/// Runs every utterance through the encoder and the teacher-forced decoder
/// and captures every block and adapter output.
pub fn dump_activations(
    model: &Model,
    tag: &str,
    eval_set: &[Example],
    max_rows: usize,
    seed: u64,
) -> Result<ActivationDump> {
    if eval_set.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut enc_in = Vec::new();
    let mut enc_sites: Vec<(String, Vec<Tensor>)> = Vec::new();
    let mut dec_in = Vec::new();
    let mut dec_sites: Vec<(String, Vec<Tensor>)> = Vec::new();
    let collect = |sites: &mut Vec<(String, Vec<Tensor>)>, caps: Vec<crate::model::Capture>| {
        if sites.is_empty() {
            sites.extend(caps.iter().map(|c| (c.label.clone(), Vec::new())));
        }
        for (slot, c) in sites.iter_mut().zip(caps) {
            slot.1.push(c.value);
        }
    };
    for ex in eval_set {
        let run = || -> Result<_> {
            let enc = model.encode(&ex.features)?;
            let mut ys_in = vec![Vocabulary::SOS_ID];
            ys_in.extend_from_slice(&ex.target);
            let dec = model.decoder_trace(&enc.h, &ys_in)?;
            Ok((enc, dec))
        };
        let (enc, dec) = run().map_err(|e| e.for_utterance(&ex.utt_id))?;
        enc_in.push(enc.input);
        collect(&mut enc_sites, enc.per_repetition);
        dec_in.push(dec.input);
        collect(&mut dec_sites, dec.per_repetition);
    }
    let enc_rows = row_subset(enc_in.iter().map(Tensor::rows).sum(), max_rows, seed);
    let dec_rows = row_subset(dec_in.iter().map(Tensor::rows).sum(), max_rows, seed ^ 1);
    let finish = |sites: Vec<(String, Vec<Tensor>)>, rows: &Option<Vec<usize>>| {
        sites
            .into_iter()
            .map(|(l, parts)| Ok((l, stack(&parts, rows)?)))
            .collect::<Result<Vec<_>>>()
    };
    Ok(ActivationDump {
        tag: tag.to_string(),
        encoder_input: stack(&enc_in, &enc_rows)?,
        encoder: finish(enc_sites, &enc_rows)?,
        decoder_input: stack(&dec_in, &dec_rows)?,
        decoder: finish(dec_sites, &dec_rows)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkaEntry {
    pub site_a: String,
    pub site_b: String,
    pub cka: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CkaReport {
    pub entries: Vec<CkaEntry>,
    /// `|cka(block) − cka(after-ADM)|` per depth label.
    pub push_away: Vec<(String, f64)>,
}

fn block_sites(sites: &[(String, Tensor)]) -> Vec<&(String, Tensor)> {
    sites.iter().filter(|(l, _)| !l.ends_with(ADM_SUFFIX)).collect()
}

fn compare_stack(
    a: &[(String, Tensor)],
    b: &[(String, Tensor)],
    which: &str,
    report: &mut CkaReport,
) -> Result<()> {
    let (ba, bb) = (block_sites(a), block_sites(b));
    if ba.len() != bb.len() {
        return Err(Error::Input(format!(
            "{which} depth mismatch: {} vs {} block outputs",
            ba.len(),
            bb.len()
        )));
    }
    for ((la, xa), (lb, xb)) in ba.into_iter().zip(bb) {
        let block = linear_cka(xa, xb)?;
        report.entries.push(CkaEntry {
            site_a: la.clone(),
            site_b: lb.clone(),
            cka: block,
        });
        let adm_label = format!("{lb}{ADM_SUFFIX}");
        if let Some((_, xadm)) = b.iter().find(|(l, _)| *l == adm_label) {
            let after = linear_cka(xa, xadm)?;
            report.entries.push(CkaEntry {
                site_a: la.clone(),
                site_b: adm_label,
                cka: after,
            });
            report.push_away.push((lb.clone(), (block - after).abs()));
        }
    }
    Ok(())
}

/// Same-depth comparison of two models; adapter outputs of `b` are also
/// compared against `a`'s block outputs.
pub fn horizontal_similarity(a: &ActivationDump, b: &ActivationDump) -> Result<CkaReport> {
    let mut report = CkaReport::default();
    compare_stack(&a.encoder, &b.encoder, "encoder", &mut report)?;
    compare_stack(&a.decoder, &b.decoder, "decoder", &mut report)?;
    Ok(report)
}

/// CKA between the input and output of every block and adapter application.
pub fn vertical_similarity(dump: &ActivationDump) -> Result<CkaReport> {
    let mut report = CkaReport::default();
    for (input_label, input, sites) in [
        ("enc-input", &dump.encoder_input, &dump.encoder),
        ("dec-input", &dump.decoder_input, &dump.decoder),
    ] {
        let mut prev = (input_label.to_string(), input);
        for (label, x) in sites {
            report.entries.push(CkaEntry {
                site_a: prev.0.clone(),
                site_b: label.clone(),
                cka: linear_cka(prev.1, x)?,
            });
            prev = (label.clone(), x);
        }
    }
    Ok(report)
}

/// `(site, cka ≥ threshold)` for every entry, keyed by the output site.
pub fn linearity_flags(report: &CkaReport, threshold: f64) -> Result<Vec<(String, bool)>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Input(format!("threshold {threshold} outside (0, 1]")));
    }
    Ok(report
        .entries
        .iter()
        .map(|e| (e.site_b.clone(), e.cka >= threshold))
        .collect())
}

pub fn write_report_csv(out: &mut impl Write, report: &CkaReport) -> std::io::Result<()> {
    writeln!(out, "site_a,site_b,cka")?;
    for e in &report.entries {
        writeln!(out, "{},{},{}", e.site_a, e.site_b, e.cka)?;
    }
    Ok(())
}

/// Series name of a site label: the depth number removed.
fn series_of(label: &str) -> String {
    label
        .split('-')
        .filter(|p| p.parse::<usize>().is_err())
        .collect::<Vec<_>>()
        .join("-")
}

/// Line chart of the report: x is the position within each series
/// (depth), y is CKA in [0, 1].
pub fn render_svg(report: &CkaReport, title: &str) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    for e in &report.entries {
        let key = series_of(&e.site_b);
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(e.cka),
            None => series.push((key, vec![e.cka])),
        }
    }
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (max_len - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#,
            pad - 6.0,
            y(tick) + 4.0
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">depth</text>"#, w / 2.0, h - 15.0);
    for (i, (name, vals)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = if name.ends_with("ADM") { r#" stroke-dasharray="5,4""# } else { "" };
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(j, v)| format!("{:.1},{:.1}", x(j), y(*v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            w - pad - 120.0,
            pad + 16.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Orthogonal matrix from Gram-Schmidt on a random square matrix.
    fn orthogonal(d: usize, seed: u64) -> Tensor {
        let a = random(d, d, seed);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for j in 0..d {
            let mut v: Vec<f64> = (0..d).map(|i| a.at(i, j)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
        let mut q = Tensor::zeros(&[d, d]);
        for (j, c) in cols.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                q.row_mut(i)[j] = *v;
            }
        }
        q
    }

    #[test]
    fn self_similarity_is_one() {
        let x = random(30, 5, 1);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn orthogonal_and_scale_invariance() {
        let x = random(40, 6, 2);
        let y = random(40, 4, 3);
        let q = orthogonal(4, 4);
        let yq = y.matmul(&q).unwrap().map(|v| 3.5 * v);
        let a = linear_cka(&x, &y).unwrap();
        let b = linear_cka(&x, &yq).unwrap();
        assert!((a - b).abs() <= 1e-9);
        let xq = x.matmul(&orthogonal(6, 5)).unwrap();
        assert!((linear_cka(&x, &xq).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn hand_computed_four_by_two() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 1.0], &[0.0, 4.0], &[2.0, 2.0]]).unwrap();
        let y = Tensor::from_rows(&[&[1.0, 0.0], &[2.0, 2.0], &[0.0, 1.0], &[3.0, 1.0]]).unwrap();
        // centered X: col means (1.5, 2.25); centered Y: col means (1.5, 1.0)
        // Xc = [[-.5,-.25],[1.5,-1.25],[-1.5,1.75],[.5,-.25]]
        // Yc = [[-.5,-1],[.5,1],[-1.5,0],[1.5,0]]
        // XcᵀXc = [[5, -4.5],[-4.5, 4.75]]
        // YcᵀYc = [[5, 1],[1, 2]]
        // YcᵀXc = [[4, -3.5],[2, -1]]
        let num = 16.0 + 3.5f64.powi(2) + 4.0 + 1.0;
        let den = (25.0 + 2.0 * 20.25 + 22.5625f64).sqrt() * (25.0 + 1.0 + 1.0 + 4.0f64).sqrt();
        assert!((linear_cka(&x, &y).unwrap() - num / den).abs() <= 1e-12);
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let flat = Tensor::full(&[5, 3], 2.0);
        assert!(matches!(linear_cka(&flat, &random(5, 3, 0)), Err(Error::Degenerate(_))));
        assert!(linear_cka(&random(5, 3, 0), &random(6, 3, 0)).is_err());
        assert!(linear_cka(&random(1, 3, 0), &random(1, 3, 0)).is_err());
    }

    #[test]
    fn relu_on_zero_mean_data_is_not_linear() {
        let x = random(200, 4, 7);
        let r = x.map(|v| v.max(0.0));
        assert!(linear_cka(&x, &r).unwrap() < 1.0 - 1e-3);
    }

    proptest! {
        #[test]
        fn bounded_and_symmetric(seed in any::<u64>(), n in 3usize..20, d1 in 1usize..6, d2 in 1usize..6) {
            let x = random(n, d1, seed);
            let y = random(n, d2, seed.wrapping_add(1));
            let a = linear_cka(&x, &y).unwrap();
            let b = linear_cka(&y, &x).unwrap();
            prop_assert!((0.0..=1.0 + 1e-9).contains(&a));
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    fn synthetic_dump(tag: &str, sites: &[(&str, Tensor)]) -> ActivationDump {
        let n = sites[0].1.rows();
        ActivationDump {
            tag: tag.into(),
            encoder_input: random(n, sites[0].1.cols(), 99),
            encoder: sites.iter().map(|(l, t)| (l.to_string(), t.clone())).collect(),
            decoder_input: random(3, 2, 98),
            decoder: vec![],
        }
    }

    #[test]
    fn identity_adapter_has_no_push_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = |r: &mut ChaCha8Rng| {
            Tensor::new(vec![25, 4], (0..100).map(|_| r.gen_range(0.0..2.0)).collect()).unwrap()
        };
        let (s1, s2) = (pos(&mut rng), pos(&mut rng));
        let identity = |x: &Tensor| x.matmul(&Tensor::eye(4)).unwrap().map(|v| v.max(0.0));
        let a = synthetic_dump("a", &[("enc-1", s1.clone()), ("enc-2", s2.clone())]);
        let b = synthetic_dump(
            "b",
            &[
                ("enc-1", s1.clone()),
                ("enc-1-after-ADM", identity(&s1)),
                ("enc-2", s2.clone()),
                ("enc-2-after-ADM", identity(&s2)),
            ],
        );
        let r = horizontal_similarity(&a, &b).unwrap();
        assert_eq!(r.push_away.len(), 2);
        assert!(r.push_away.iter().all(|(_, p)| p.abs() <= 1e-12));
        assert!(r.entries.iter().all(|e| (e.cka - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn depth_mismatch_is_rejected() {
        let a = synthetic_dump("a", &[("enc-1", random(10, 3, 1))]);
        let b = synthetic_dump("b", &[("enc-1", random(10, 3, 1)), ("enc-2", random(10, 3, 2))]);
        assert!(matches!(horizontal_similarity(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn vertical_identity_and_rotation() {
        let x = random(30, 4, 1);
        let mut d = synthetic_dump("v", &[("enc-1", x.clone()), ("enc-2", x.matmul(&orthogonal(4, 2)).unwrap())]);
        d.encoder_input = x.clone();
        d.decoder_input = random(6, 2, 3);
        d.decoder = vec![("dec-1".into(), d.decoder_input.map(|v| v.max(0.0)))];
        let r = vertical_similarity(&d).unwrap();
        assert_eq!(r.entries.len(), 3);
        assert_eq!(r.entries[0].site_a, "enc-input");
        assert!((r.entries[0].cka - 1.0).abs() <= 1e-12);
        assert!((r.entries[1].cka - 1.0).abs() <= 1e-9);
        let flags = linearity_flags(&r, DEFAULT_LINEARITY_THRESHOLD).unwrap();
        assert!(flags[0].1 && flags[1].1);
        let strict = linearity_flags(&r, 1.0).unwrap();
        assert!(strict.iter().all(|(_, f)| !f || r.entries.iter().any(|e| e.cka >= 1.0)));
        assert!(linearity_flags(&r, 0.0).is_err());
    }

    #[test]
    fn subset_is_shared_and_bounded() {
        assert_eq!(row_subset(10, 20, 0), None);
        let a = row_subset(100, 30, 5).unwrap();
        assert_eq!(a, row_subset(100, 30, 5).unwrap());
        assert_eq!(a.len(), 30);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn csv_and_svg_output() {
        let report = CkaReport {
            entries: vec![
                CkaEntry { site_a: "enc-1".into(), site_b: "enc-1".into(), cka: 0.9 },
                CkaEntry { site_a: "enc-1".into(), site_b: "enc-1-after-ADM".into(), cka: 0.7 },
            ],
            push_away: vec![],
        };
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &report).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "site_a,site_b,cka\nenc-1,enc-1,0.9\nenc-1,enc-1-after-ADM,0.7\n"
        );
        let svg = render_svg(&report, "t");
        assert!(svg.starts_with("<svg") && svg.contains("enc-after-ADM"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
