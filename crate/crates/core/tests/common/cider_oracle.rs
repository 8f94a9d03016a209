use std::collections::HashMap;

/// Straight-line CIDEr-D: n-grams as joined strings, weights recomputed for
/// every comparison.
pub fn brute_cider(cands: &[&str], refs: &[Vec<&str>]) -> Vec<f64> {
    let grams = |s: &str, n: usize| -> HashMap<String, f64> {
        let w: Vec<&str> = s.split_whitespace().collect();
        let mut m = HashMap::new();
        if w.len() >= n {
            for i in 0..=w.len() - n {
                *m.entry(w[i..i + n].join(" ")).or_insert(0.0) += 1.0;
            }
        }
        m
    };
    let big_n = cands.len() as f64;
    let df = |g: &str, n: usize| -> f64 {
        refs.iter()
            .filter(|rs| rs.iter().any(|r| grams(r, n).contains_key(g)))
            .count() as f64
    };
    let tfidf = |s: &str, n: usize| -> HashMap<String, f64> {
        grams(s, n)
            .into_iter()
            .map(|(g, c)| {
                let d = df(&g, n).max(1.0);
                let w = c * (big_n.ln() - d.ln());
                (g, w)
            })
            .collect()
    };
    let norm = |v: &HashMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let mut total = 0.0;
            for r in rs {
                let lc = c.split_whitespace().count() as f64;
                let lr = r.split_whitespace().count() as f64;
                let pen = (-(lc - lr).powi(2) / 72.0).exp();
                let mut per_n = 0.0;
                for n in 1..=4 {
                    let (vc, vr) = (tfidf(c, n), tfidf(r, n));
                    let mut dot = 0.0;
                    for (g, &x) in &vc {
                        if let Some(&y) = vr.get(g) {
                            dot += x.min(y) * y;
                        }
                    }
                    let (nc, nr) = (norm(&vc), norm(&vr));
                    if nc != 0.0 && nr != 0.0 {
                        dot /= nc * nr;
                    }
                    per_n += dot * pen;
                }
                total += per_n / 4.0;
            }
            total / rs.len() as f64 * 10.0
        })
        .collect()
}
