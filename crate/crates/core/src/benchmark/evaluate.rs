//! Oracle binding evaluation on toy images: find each concept's shape by
//! template matching, then check the color inside it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scg::BindingPrompt;
use crate::tensor::Tensor;
use crate::toy_dit::{DatasetConfig, NamedColor, ShapeKind};

/// Locates known shapes on a known background.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutDetector {
    pub shape_size: usize,
    pub palette: Vec<NamedColor>,
    pub background: [f32; 3],
    /// Minimum contrast between a shape's cells and its surrounding ring.
    pub min_score: f64,
}

/// A detected shape placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub top: usize,
    pub left: usize,
    pub cells: Vec<usize>,
    pub score: f64,
}

impl LayoutDetector {
    pub fn for_dataset(cfg: &DatasetConfig) -> Self {
        Self {
            shape_size: cfg.shape_size,
            palette: cfg.colors.clone(),
            background: cfg.background,
            min_score: 0.4,
        }
    }

    /// How far each cell is from the background, capped at 1.
    fn foreground(&self, image: &Tensor<f32>) -> Vec<f64> {
        image
            .data()
            .chunks(3)
            .map(|px| {
                let d2: f64 = px
                    .iter()
                    .zip(&self.background)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum();
                d2.sqrt().min(1.0)
            })
            .collect()
    }

    /// Every in-bounds placement of `shape`, scored as mean foreground on the
    /// shape minus mean foreground on the cells bordering it; best first.
    pub fn candidates(&self, image: &Tensor<f32>, shape: ShapeKind) -> Result<Vec<Detection>> {
        let (h, w) = image_dims(image)?;
        let s = self.shape_size;
        if s == 0 || s > h || s > w {
            return Err(Error::Config(format!("shape size {s} does not fit a {h}x{w} image")));
        }
        let fg = self.foreground(image);
        let offsets = shape.cells(s);
        let mut inside = vec![false; (s + 2) * (s + 2)];
        for &(dy, dx) in &offsets {
            inside[(dy + 1) * (s + 2) + dx + 1] = true;
        }
        // Ring: cells within one step (8-neighbourhood) of the shape but not on it.
        let mut ring = Vec::new();
        for y in 0..s + 2 {
            for x in 0..s + 2 {
                if inside[y * (s + 2) + x] {
                    continue;
                }
                let near = (y.saturating_sub(1)..=(y + 1).min(s + 1))
                    .any(|yy| (x.saturating_sub(1)..=(x + 1).min(s + 1)).any(|xx| inside[yy * (s + 2) + xx]));
                if near {
                    ring.push((y as isize - 1, x as isize - 1));
                }
            }
        }
        let mut out = Vec::with_capacity((h - s + 1) * (w - s + 1));
        for top in 0..=h - s {
            for left in 0..=w - s {
                let cells: Vec<usize> = offsets.iter().map(|&(dy, dx)| (top + dy) * w + left + dx).collect();
                let on = cells.iter().map(|&c| fg[c]).sum::<f64>() / cells.len() as f64;
                let (mut sum, mut n) = (0.0, 0usize);
                for &(dy, dx) in &ring {
                    let (y, x) = (top as isize + dy, left as isize + dx);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        sum += fg[y as usize * w + x as usize];
                        n += 1;
                    }
                }
                let off = if n == 0 { 0.0 } else { sum / n as f64 };
                out.push(Detection {
                    top,
                    left,
                    cells,
                    score: on - off,
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.top, a.left).cmp(&(b.top, b.left))));
        Ok(out)
    }

    /// Best joint placement of `shapes` with no two sharing a cell. A shape
    /// whose best compatible placement scores below `min_score` gets `None`.
    pub fn detect(&self, image: &Tensor<f32>, shapes: &[ShapeKind]) -> Result<Vec<Option<Detection>>> {
        const BEAM: usize = 24;
        let lists: Vec<Vec<Detection>> = shapes
            .iter()
            .map(|&s| {
                self.candidates(image, s)
                    .map(|c| c.into_iter().filter(|d| d.score >= self.min_score).take(BEAM).collect())
            })
            .collect::<Result<_>>()?;
        let mut best: (f64, Vec<Option<usize>>) = (f64::NEG_INFINITY, vec![None; shapes.len()]);
        let mut choice = Vec::with_capacity(shapes.len());
        search(&lists, &mut choice, 0.0, &mut best);
        Ok(best
            .1
            .iter()
            .zip(&lists)
            .map(|(pick, list)| pick.map(|i| list[i].clone()))
            .collect())
    }

    /// Palette color nearest to `rgb`.
    pub fn nearest_color(&self, rgb: [f64; 3]) -> Option<&NamedColor> {
        self.palette.iter().min_by(|a, b| {
            let d = |c: &NamedColor| -> f64 { c.rgb.iter().zip(&rgb).map(|(&p, &q)| (p as f64 - q).powi(2)).sum() };
            d(a).total_cmp(&d(b))
        })
    }
}

/// Exhaustive search over the beams; an unplaced shape scores zero, so
/// placing one is always preferred when it fits.
fn search(lists: &[Vec<Detection>], choice: &mut Vec<Option<usize>>, score: f64, best: &mut (f64, Vec<Option<usize>>)) {
    let k = choice.len();
    if k == lists.len() {
        let placed = choice.iter().filter(|c| c.is_some()).count() as f64;
        // Placing more shapes dominates; score breaks ties.
        let total = placed * 1e6 + score;
        if total > best.0 {
            *best = (total, choice.clone());
        }
        return;
    }
    for (i, cand) in lists[k].iter().enumerate() {
        let clash = choice
            .iter()
            .enumerate()
            .any(|(j, c)| c.is_some_and(|c| lists[j][c].cells.iter().any(|x| cand.cells.contains(x))));
        if !clash {
            choice.push(Some(i));
            search(lists, choice, score + cand.score, best);
            choice.pop();
        }
    }
    choice.push(None);
    search(lists, choice, score, best);
    choice.pop();
}

fn image_dims(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => Err(Error::shape("image must be (h, w, 3)", image.shape(), &[])),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair: usize,
    pub matched: bool,
    /// Why the pair could not be judged, e.g. `no-region:disc`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingScore {
    pub per_pair: Vec<PairResult>,
    /// Fraction of pairs matched.
    pub accuracy: f64,
}

impl BindingScore {
    pub fn flags(&self) -> Vec<&str> {
        self.per_pair.iter().filter_map(|p| p.flag.as_deref()).collect()
    }
}

/// For each pair: is the mean color inside the concept's detected shape
/// closest to the bound color? Missing shapes count as unmatched and flagged.
pub fn evaluate_binding(
    image: &Tensor<f32>,
    prompt: &BindingPrompt,
    detector: &LayoutDetector,
) -> Result<BindingScore> {
    let mut shapes = Vec::new();
    for pair in &prompt.pairs {
        let word = prompt.word(pair.concept);
        shapes
            .push(ShapeKind::from_name(word).ok_or_else(|| Error::Invalid(format!("{word:?} is not a known shape")))?);
    }
    let found = detector.detect(image, &shapes)?;
    let data = image.data();
    let per_pair: Vec<PairResult> = prompt
        .pairs
        .iter()
        .zip(found)
        .enumerate()
        .map(|(i, (pair, det))| match det {
            None => PairResult {
                pair: i,
                matched: false,
                flag: Some(format!("no-region:{}", prompt.word(pair.concept))),
            },
            Some(det) => {
                let mut mean = [0.0f64; 3];
                for &c in &det.cells {
                    for (m, &v) in mean.iter_mut().zip(&data[c * 3..c * 3 + 3]) {
                        *m += v as f64;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= det.cells.len() as f64);
                let nearest = detector.nearest_color(mean).map(|c| c.name.as_str());
                PairResult {
                    pair: i,
                    matched: nearest == Some(prompt.word(pair.bound)),
                    flag: None,
                }
            }
        })
        .collect();
    let accuracy = per_pair.iter().filter(|p| p.matched).count() as f64 / per_pair.len().max(1) as f64;
    Ok(BindingScore { per_pair, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_dit::make_dataset;

    fn cfg() -> DatasetConfig {
        DatasetConfig {
            num_samples: 50,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn clean_samples_score_perfectly() {
        let cfg = cfg();
        let det = LayoutDetector::for_dataset(&cfg);
        for s in make_dataset(&cfg, 5).unwrap() {
            let score = evaluate_binding(&s.image, &s.prompt, &det).unwrap();
            assert_eq!(score.accuracy, 1.0, "{}", s.prompt.raw_text);
        }
    }

    #[test]
    fn swapped_colors_score_zero() {
        let cfg = cfg();
        let det = LayoutDetector::for_dataset(&cfg);
        for s in make_dataset(&cfg, 6).unwrap() {
            let mut layout = s.layout.clone();
            let c0 = layout.regions[0].color.clone();
            layout.regions[0].color = layout.regions[1].color.clone();
            layout.regions[1].color = c0;
            let img = cfg.render(&layout).unwrap();
            assert_eq!(evaluate_binding(&img, &s.prompt, &det).unwrap().accuracy, 0.0);
        }
    }

    #[test]
    fn gray_image_flags_every_pair() {
        let cfg = cfg();
        let det = LayoutDetector::for_dataset(&cfg);
        let s = &make_dataset(&cfg, 7).unwrap()[0];
        let gray = Tensor::filled([16, 16, 3], 0.5f32);
        let score = evaluate_binding(&gray, &s.prompt, &det).unwrap();
        assert_eq!(score.accuracy, 0.0);
        assert_eq!(score.flags().len(), 2);
        assert!(score.flags().iter().all(|f| f.starts_with("no-region:")));
    }
}
