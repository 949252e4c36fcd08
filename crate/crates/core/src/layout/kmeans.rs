use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{assign_reading_order, BBox, Category, Dims, LayoutBox, LayoutSet, OcrToken};
use crate::error::{Error, Result};

/// Parameters of the OCR + K-means analyzer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansOptions {
    /// Cluster count; `None` uses [`default_k`].
    pub k: Option<usize>,
    pub seed: u64,
    /// Independent k-means++ initializations; the lowest-variance fit wins.
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            k: None,
            seed: 0,
            restarts: 8,
            max_iter: 100,
        }
    }
}

/// `clamp(round(n / 10), 1, 30)`.
pub fn default_k(n_tokens: usize) -> usize {
    ((n_tokens as f64 / 10.0).round() as usize).clamp(1, 30)
}

/// Result of one K-means run over 2-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
}

/// Seeded K-means (k-means++ initialization, Lloyd iterations).
pub fn kmeans(points: &[[f64; 2]], k: usize, opts: &KMeansOptions) -> Result<KMeansFit> {
    if points.is_empty() {
        return Err(Error::Parameter("k-means needs at least one point".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::Parameter(format!(
            "k = {k} must be between 1 and the number of tokens ({})",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..opts.restarts.max(1) {
        let init = plus_plus_init(points, k, &mut rng);
        let fit = lloyd(points, init, opts.max_iter);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn plus_plus_init(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // float slack can leave `chosen` on a zero-weight point
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|w| *w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(p: &[f64; 2], centroids: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn lloyd(points: &[[f64; 2]], mut centroids: Vec<[f64; 2]>, max_iter: usize) -> KMeansFit {
    let k = centroids.len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iter {
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        for j in 0..k {
            // empty clusters keep their previous centroid
            if counts[j] > 0 {
                centroids[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = within_cluster_variance(points, &labels);
    KMeansFit {
        labels,
        centroids,
        inertia,
    }
}

/// Sum over clusters of squared distances to the cluster mean.
pub fn within_cluster_variance(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l][0] += p[0];
        sums[l][1] += p[1];
        counts[l] += 1;
    }
    let means: Vec<[f64; 2]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            if c == 0 {
                [0.0, 0.0]
            } else {
                [s[0] / c as f64, s[1] / c as f64]
            }
        })
        .collect();
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| dist2(p, &means[l]))
        .sum()
}

/// Token centers scaled to the unit square by the image size.
pub fn token_points(tokens: &[OcrToken], dims: Dims) -> Vec<[f64; 2]> {
    tokens
        .iter()
        .map(|t| {
            let (cx, cy) = t.bbox.center();
            [cx / dims.width as f64, cy / dims.height as f64]
        })
        .collect()
}

/// Groups OCR tokens into layout regions with K-means over their centers.
///
/// Each cluster becomes one box spanning its member tokens, with the
/// member texts joined in reading order. Clusters whose spans overlap are
/// merged so that every token lies inside exactly one output box.
pub fn cluster_ocr_tokens(
    tokens: &[OcrToken],
    image_id: &str,
    dims: Dims,
    opts: &KMeansOptions,
) -> Result<LayoutSet> {
    if tokens.is_empty() {
        return Err(Error::Parameter(
            "clustering needs at least one OCR token".into(),
        ));
    }
    let k = opts.k.unwrap_or_else(|| default_k(tokens.len()));
    let fit = kmeans(&token_points(tokens, dims), k, opts)?;

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in fit.labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups.retain(|g| !g.is_empty());
    let groups = merge_overlapping(groups, tokens);

    let boxes = groups
        .iter()
        .map(|members| {
            let bbox = members
                .iter()
                .map(|&i| tokens[i].bbox)
                .reduce(|a, b| a.union(&b))
                .expect("non-empty group");
            let words: Vec<LayoutBox> = members
                .iter()
                .map(|&i| LayoutBox {
                    id: 0,
                    bbox: tokens[i].bbox,
                    category: Category::Text,
                    text: Some(tokens[i].text.clone()),
                })
                .collect();
            let text = assign_reading_order(words)
                .into_iter()
                .filter_map(|w| w.text)
                .collect::<Vec<_>>()
                .join(" ");
            LayoutBox {
                id: 0,
                bbox,
                category: Category::Text,
                text: Some(text),
            }
        })
        .collect();
    LayoutSet::new(image_id, dims.width, dims.height, boxes)
}

fn span(group: &[usize], tokens: &[OcrToken]) -> BBox {
    group
        .iter()
        .map(|&i| tokens[i].bbox)
        .reduce(|a, b| a.union(&b))
        .expect("non-empty group")
}

fn merge_overlapping(mut groups: Vec<Vec<usize>>, tokens: &[OcrToken]) -> Vec<Vec<usize>> {
    loop {
        let spans: Vec<BBox> = groups.iter().map(|g| span(g, tokens)).collect();
        let pair = (0..groups.len())
            .flat_map(|i| (i + 1..groups.len()).map(move |j| (i, j)))
            .find(|&(i, j)| spans[i].intersection(&spans[j]).is_some());
        match pair {
            Some((i, j)) => {
                let moved = groups.remove(j);
                groups[i].extend(moved);
                groups[i].sort_unstable();
            }
            None => return groups,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(x: u32, y: u32, w: u32, h: u32, text: &str) -> OcrToken {
        OcrToken::new(BBox::new(x, y, w, h).unwrap(), text, 0.9).unwrap()
    }

    const DIMS: Dims = Dims {
        width: 1000,
        height: 1000,
    };

    /// Exhaustive 2-partition search over label vectors.
    fn best_two_partition(points: &[[f64; 2]]) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut sums = [[0.0; 2]; 2];
            let mut counts = [0usize; 2];
            for (i, p) in points.iter().enumerate() {
                let g = ((mask >> i) & 1) as usize;
                sums[g][0] += p[0];
                sums[g][1] += p[1];
                counts[g] += 1;
            }
            let mut cost = 0.0;
            for (i, p) in points.iter().enumerate() {
                let g = ((mask >> i) & 1) as usize;
                let mx = sums[g][0] / counts[g] as f64;
                let my = sums[g][1] / counts[g] as f64;
                cost += (p[0] - mx).powi(2) + (p[1] - my).powi(2);
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn corner_pairs_split_into_two_boxes() {
        let tokens = vec![
            tok(0, 0, 40, 10, "top"),
            tok(0, 15, 40, 10, "left"),
            tok(950, 970, 40, 10, "bottom"),
            tok(900, 985, 40, 10, "right"),
        ];
        let opts = KMeansOptions {
            k: Some(2),
            seed: 7,
            ..Default::default()
        };
        let layout = cluster_ocr_tokens(&tokens, "p", DIMS, &opts).unwrap();
        assert_eq!(layout.len(), 2);
        assert_eq!(layout.boxes[0].bbox, BBox::new(0, 0, 40, 25).unwrap());
        assert_eq!(layout.boxes[0].text.as_deref(), Some("top left"));
        assert_eq!(layout.boxes[1].bbox, BBox::new(900, 970, 90, 25).unwrap());

        let points = token_points(&tokens, DIMS);
        let fit = kmeans(&points, 2, &opts).unwrap();
        assert!((fit.inertia - best_two_partition(&points)).abs() < 1e-12);
    }

    #[test]
    fn single_token() {
        let tokens = vec![tok(10, 20, 30, 40, "only")];
        let opts = KMeansOptions {
            k: Some(1),
            ..Default::default()
        };
        let layout = cluster_ocr_tokens(&tokens, "p", DIMS, &opts).unwrap();
        assert_eq!(layout.len(), 1);
        assert_eq!(layout.boxes[0].bbox, tokens[0].bbox);
        assert_eq!(layout.boxes[0].text.as_deref(), Some("only"));
    }

    #[test]
    fn k_larger_than_tokens_is_rejected() {
        let tokens = vec![tok(10, 20, 30, 40, "a")];
        let opts = KMeansOptions {
            k: Some(2),
            ..Default::default()
        };
        assert!(matches!(
            cluster_ocr_tokens(&tokens, "p", DIMS, &opts),
            Err(Error::Parameter(_))
        ));
        assert!(cluster_ocr_tokens(&[], "p", DIMS, &KMeansOptions::default()).is_err());
    }

    #[test]
    fn default_k_heuristic() {
        assert_eq!(default_k(1), 1);
        assert_eq!(default_k(14), 1);
        assert_eq!(default_k(15), 2);
        assert_eq!(default_k(123), 12);
        assert_eq!(default_k(10_000), 30);
    }

    #[test]
    fn duplicate_points_do_not_break_init() {
        let tokens = vec![
            tok(5, 5, 10, 10, "a"),
            tok(5, 5, 10, 10, "b"),
            tok(5, 5, 10, 10, "c"),
        ];
        let opts = KMeansOptions {
            k: Some(3),
            seed: 1,
            ..Default::default()
        };
        let layout = cluster_ocr_tokens(&tokens, "p", DIMS, &opts).unwrap();
        // identical spans overlap and merge into one region
        assert_eq!(layout.len(), 1);
        assert_eq!(layout.boxes[0].text.as_deref(), Some("a b c"));
    }

    #[test]
    fn every_token_in_exactly_one_box() {
        let mut tokens = Vec::new();
        let mut s = 17u64;
        for i in 0..60 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            let x = (s >> 40) as u32 % 900;
            let y = (s >> 20) as u32 % 950;
            tokens.push(tok(x, y, 20 + (i % 7) * 5, 12, &format!("w{i}")));
        }
        let opts = KMeansOptions {
            k: None,
            seed: 3,
            ..Default::default()
        };
        let a = cluster_ocr_tokens(&tokens, "p", DIMS, &opts).unwrap();
        let b = cluster_ocr_tokens(&tokens, "p", DIMS, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        for t in &tokens {
            let n = a.boxes.iter().filter(|b| b.bbox.contains(&t.bbox)).count();
            assert_eq!(n, 1, "token {:?}", t.bbox);
        }
        a.validate().unwrap();
    }
}
