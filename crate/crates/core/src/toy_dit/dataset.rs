//! Synthetic two-shape images with color-bound prompts.
//!
//! Each image holds two different shapes filled with two different colors on a
//! flat background. The prompt reads "a <color> <shape> and a <color> <shape>",
//! but the model only ever sees the prompt as a bag of tokens, so it cannot
//! tell which color belongs to which shape.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scg::prompt::{BindingPair, BindingPrompt, PairKind, Task};
use crate::tensor::Tensor;
use crate::text::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Disc,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disc => "disc",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Cells `(dy, dx)` covered inside a `size × size` box.
    pub fn cells(self, size: usize) -> Vec<(usize, usize)> {
        let s = size as f64;
        let centre = s / 2.0;
        let mut out = Vec::new();
        for y in 0..size {
            for x in 0..size {
                let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = match self {
                    ShapeKind::Square => true,
                    ShapeKind::Disc => (cy - centre).powi(2) + (cx - centre).powi(2) <= centre * centre + 1e-9,
                    ShapeKind::Triangle => (cx - centre).abs() <= cy / s * centre + 1e-9,
                    ShapeKind::Cross => {
                        let half = (s / 6.0).max(0.5);
                        (cx - centre).abs() <= half || (cy - centre).abs() <= half
                    }
                };
                if inside {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [f32; 3],
}

impl NamedColor {
    pub fn new(name: &str, rgb: [f32; 3]) -> Self {
        Self {
            name: name.to_string(),
            rgb,
        }
    }
}

/// How shape boxes are positioned on the grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Uniformly anywhere, rejecting overlaps.
    #[default]
    Free,
    /// The grid is cut into equal vertical strips, one per shape, assigned in
    /// random order; each box sits at its strip's centre moved by up to
    /// `jitter` cells along each axis.
    SideBySide { jitter: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    /// Side of each shape's bounding box in cells.
    pub shape_size: usize,
    /// Empty cells kept between the two shapes' boxes.
    pub gap: usize,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<NamedColor>,
    pub background: [f32; 3],
    pub placement: Placement,
    pub num_samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            shape_size: 6,
            gap: 1,
            shapes: ShapeKind::ALL.to_vec(),
            colors: default_colors(),
            background: [0.0, 0.0, 0.0],
            placement: Placement::Free,
            num_samples: 2048,
        }
    }
}

pub fn default_colors() -> Vec<NamedColor> {
    vec![
        NamedColor::new("red", [1.0, 0.0, 0.0]),
        NamedColor::new("green", [0.0, 1.0, 0.0]),
        NamedColor::new("blue", [0.0, 0.0, 1.0]),
        NamedColor::new("yellow", [1.0, 1.0, 0.0]),
        NamedColor::new("magenta", [1.0, 0.0, 1.0]),
        NamedColor::new("cyan", [0.0, 1.0, 1.0]),
    ]
}

/// Where one concept was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Token position of the concept word in the prompt.
    pub concept: usize,
    pub shape: ShapeKind,
    pub color: String,
    pub top: usize,
    pub left: usize,
    /// Row-major indices of covered cells.
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    /// `(h, w, 3)` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub prompt: BindingPrompt,
    pub layout: Layout,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.len() < 2 {
            return Err(Error::Config("dataset needs at least 2 concept shapes".into()));
        }
        if self.colors.len() < 4 {
            return Err(Error::Config("dataset needs at least 4 attribute colors".into()));
        }
        let mut names: Vec<&str> = self.colors.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.colors.len() {
            return Err(Error::Config("color names must be distinct".into()));
        }
        let mut shapes = self.shapes.clone();
        shapes.sort_by_key(|s| s.name());
        shapes.dedup();
        if shapes.len() != self.shapes.len() {
            return Err(Error::Config("shapes must be distinct".into()));
        }
        if self.shape_size == 0 || self.shape_size > self.height.min(self.width) {
            return Err(Error::Config("shape_size must fit the grid".into()));
        }
        for (i, a) in self.shapes.iter().enumerate() {
            if let Some(b) = self.shapes[i + 1..]
                .iter()
                .find(|b| b.cells(self.shape_size) == a.cells(self.shape_size))
            {
                return Err(Error::Config(format!(
                    "{} and {} are indistinguishable at shape_size {}",
                    a.name(),
                    b.name(),
                    self.shape_size
                )));
            }
        }
        let span = 2 * self.shape_size + self.gap;
        match self.placement {
            Placement::Free if span > self.height && span > self.width => {
                return Err(Error::Config("two shapes cannot be placed without overlap".into()));
            }
            Placement::SideBySide { .. } if span > self.width => {
                return Err(Error::Config("two shapes do not fit side by side".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// "a", "and", then the colors, then the shapes.
    pub fn vocab(&self) -> Vocab {
        let mut words = vec!["a".to_string(), "and".to_string()];
        words.extend(self.colors.iter().map(|c| c.name.clone()));
        words.extend(self.shapes.iter().map(|s| s.name().to_string()));
        Vocab::new(words)
    }

    pub fn color(&self, name: &str) -> Option<&NamedColor> {
        self.colors.iter().find(|c| c.name == name)
    }

    /// The coarse prompt "a <c0> <s0> and a <c1> <s1>".
    pub fn prompt(&self, first: (&str, ShapeKind), second: (&str, ShapeKind)) -> Result<BindingPrompt> {
        let text = format!(
            "a {} {} and a {} {}",
            first.0,
            first.1.name(),
            second.0,
            second.1.name()
        );
        let pair = |concept, bound| BindingPair {
            concept,
            bound,
            kind: PairKind::Attribute,
        };
        BindingPrompt::new(
            text,
            &self.vocab(),
            vec![pair(2, 1), pair(6, 5)],
            Task::Coarse,
            None,
            None,
        )
    }

    /// Draws the prompt's shapes at random non-overlapping positions.
    ///
    /// Works for any prompt whose pairs bind a color word to a shape word.
    pub fn render_prompt(&self, prompt: &BindingPrompt, rng: &mut impl Rng) -> Result<ToySample> {
        let mut items = Vec::new();
        for pair in &prompt.pairs {
            let shape_word = prompt.word(pair.concept);
            let color_word = prompt.word(pair.bound);
            let shape = ShapeKind::from_name(shape_word)
                .ok_or_else(|| Error::Invalid(format!("{shape_word:?} is not a known shape")))?;
            let color = self
                .color(color_word)
                .ok_or_else(|| Error::Invalid(format!("{color_word:?} is not a palette color")))?;
            items.push((pair.concept, shape, color.clone()));
        }
        let placements = self.place(items.len(), rng)?;
        let regions = items
            .into_iter()
            .zip(placements)
            .map(|((concept, shape, color), (top, left))| Region {
                concept,
                shape,
                cells: shape
                    .cells(self.shape_size)
                    .into_iter()
                    .map(|(dy, dx)| (top + dy) * self.width + left + dx)
                    .collect(),
                color: color.name,
                top,
                left,
            })
            .collect();
        let layout = Layout { regions };
        Ok(ToySample {
            image: self.render(&layout)?,
            prompt: prompt.clone(),
            layout,
        })
    }

    pub fn render(&self, layout: &Layout) -> Result<Tensor<f32>> {
        let mut data: Vec<f32> = (0..self.height * self.width).flat_map(|_| self.background).collect();
        for r in &layout.regions {
            let c = self
                .color(&r.color)
                .ok_or_else(|| Error::Invalid(format!("{:?} is not a palette color", r.color)))?;
            for &cell in &r.cells {
                data[cell * 3..cell * 3 + 3].copy_from_slice(&c.rgb);
            }
        }
        Tensor::new([self.height, self.width, 3], data)
    }

    /// Top-left corners for `count` boxes with `gap` empty cells between them.
    fn place(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
        if let Placement::SideBySide { jitter } = self.placement {
            return self.place_side_by_side(count, jitter, rng);
        }
        let s = self.shape_size;
        let (max_top, max_left) = (self.height - s, self.width - s);
        for _ in 0..10_000 {
            let mut boxes: Vec<(usize, usize)> = Vec::with_capacity(count);
            for _ in 0..count {
                let cand = (rng.gen_range(0..=max_top), rng.gen_range(0..=max_left));
                let clear = boxes.iter().all(|&(t, l)| {
                    let dy = cand.0.abs_diff(t);
                    let dx = cand.1.abs_diff(l);
                    dy >= s + self.gap || dx >= s + self.gap
                });
                if !clear {
                    break;
                }
                boxes.push(cand);
            }
            if boxes.len() == count {
                return Ok(boxes);
            }
        }
        Err(Error::Config(format!("could not place {count} shapes on the grid")))
    }
}

impl DatasetConfig {
    fn place_side_by_side(&self, count: usize, jitter: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
        let s = self.shape_size;
        let strip = self.width / count.max(1);
        if count == 0 || strip < s {
            return Err(Error::Config(format!(
                "{count} shapes of size {s} do not fit side by side"
            )));
        }
        let mut strips: Vec<usize> = (0..count).collect();
        strips.shuffle(rng);
        let wobble = |centre: usize, lo: usize, hi: usize, rng: &mut dyn rand::RngCore| {
            let low = centre.saturating_sub(jitter).max(lo);
            let high = (centre + jitter).min(hi);
            rng.gen_range(low..=high)
        };
        if strip < s + self.gap {
            return Err(Error::Config(format!(
                "{count} shapes of size {s} with gap {} do not fit side by side",
                self.gap
            )));
        }
        let mut boxes = Vec::with_capacity(count);
        for k in strips {
            let lo = k * strip;
            // All but the last strip keep `gap` free cells at their right edge.
            let room = if k + 1 < count { strip - s - self.gap } else { strip - s };
            let left = wobble(lo + room / 2, lo, lo + room, rng);
            let top = wobble((self.height - s) / 2, 0, self.height - s, rng);
            boxes.push((top, left));
        }
        Ok(boxes)
    }
}

/// Deterministic dataset of `config.num_samples` two-shape images.
pub fn make_dataset(config: &DatasetConfig, seed: u64) -> Result<Vec<ToySample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(config.num_samples);
    for _ in 0..config.num_samples {
        let shapes: Vec<ShapeKind> = config.shapes.choose_multiple(&mut rng, 2).copied().collect();
        let colors: Vec<&NamedColor> = config.colors.choose_multiple(&mut rng, 2).collect();
        let prompt = config.prompt((&colors[0].name, shapes[0]), (&colors[1].name, shapes[1]))?;
        out.push(config.render_prompt(&prompt, &mut rng)?);
    }
    Ok(out)
}
