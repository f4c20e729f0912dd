use super::EvalError;
use crate::drumsim::CLASSES;

/// Pixels per matrix cell in rendered heatmaps.
const CELL_PX: usize = 16;

/// 13x13 count matrix; rows are true classes, columns predicted ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self {
            counts: vec![0; CLASSES * CLASSES],
        }
    }

    /// Tallies predictions against true labels.
    pub fn from_predictions(preds: &[u16], labels: &[u16]) -> Result<Self, EvalError> {
        if preds.len() != labels.len() {
            return Err(EvalError::Format(format!(
                "{} predictions against {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut m = Self::new();
        for (&p, &l) in preds.iter().zip(labels) {
            if p as usize >= CLASSES || l as usize >= CLASSES {
                return Err(EvalError::Format(format!(
                    "class out of range: predicted {p}, true {l}"
                )));
            }
            m.counts[l as usize * CLASSES + p as usize] += 1;
        }
        Ok(m)
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * CLASSES + predicted]
    }

    /// Per-true-class totals; equal to the test set's per-class counts.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(CLASSES).map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CLASSES).map(|c| self.count(c, c)).sum()
    }

    /// Fraction of correct predictions: trace over total.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.trace() as f64 / total as f64
    }

    /// CSV with a `true\predicted` header of class letters.
    pub fn to_csv(&self) -> String {
        let letters: Vec<char> = (0..CLASSES).map(|c| (b'a' + c as u8) as char).collect();
        let mut out = String::from("true\\predicted");
        for l in &letters {
            out.push(',');
            out.push(*l);
        }
        out.push('\n');
        for (row, l) in letters.iter().enumerate() {
            out.push(*l);
            for col in 0..CLASSES {
                out.push_str(&format!(",{}", self.count(row, col)));
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`ConfusionMatrix::to_csv`] output.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut m = Self::new();
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if !header.starts_with("true\\predicted") {
            return Err(EvalError::Format(format!(
                "confusion csv header: {header:?}"
            )));
        }
        let mut rows = 0usize;
        for (row, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            fields.next(); // row's class letter
            let mut cols = 0usize;
            for field in fields {
                if cols >= CLASSES || row >= CLASSES {
                    return Err(EvalError::Format("confusion csv too large".into()));
                }
                let v: u64 = field
                    .parse()
                    .map_err(|_| EvalError::Format(format!("confusion csv count: {field:?}")))?;
                m.counts[row * CLASSES + cols] = v;
                cols += 1;
            }
            if cols != CLASSES {
                return Err(EvalError::Format(format!(
                    "confusion csv row {row} has {cols} columns"
                )));
            }
            rows += 1;
        }
        if rows != CLASSES {
            return Err(EvalError::Format(format!(
                "confusion csv has {rows} rows"
            )));
        }
        Ok(m)
    }

    /// Grayscale intensities scaled by the largest count, row-major 13x13.
    /// The maximum count maps to 255; an empty matrix is all black.
    fn intensities(&self) -> Vec<u8> {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        self.counts
            .iter()
            .map(|&v| {
                if max == 0 {
                    0
                } else {
                    ((v as f64 / max as f64) * 255.0).round() as u8
                }
            })
            .collect()
    }

    /// Renders a binary PGM heatmap, each cell a 16x16 block.
    pub fn to_pgm(&self) -> Vec<u8> {
        let cells = self.intensities();
        let side = CLASSES * CELL_PX;
        let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
        for row in 0..side {
            for col in 0..CLASSES {
                let v = cells[(row / CELL_PX) * CLASSES + col];
                out.extend(std::iter::repeat(v).take(CELL_PX));
            }
        }
        out
    }

    /// One SVG group of 13x13 shaded cells at the given offset, for the
    /// report's matrix grid.
    pub fn to_svg_group(&self, x0: f64, y0: f64, cell: f64) -> String {
        let cells = self.intensities();
        let mut s = format!("<g transform=\"translate({x0},{y0})\">\n");
        for row in 0..CLASSES {
            for col in 0..CLASSES {
                let v = cells[row * CLASSES + col];
                s.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell:.1}\" height=\"{cell:.1}\" fill=\"rgb({v},{v},{v})\"/>\n",
                    col as f64 * cell,
                    row as f64 * cell,
                ));
            }
        }
        s.push_str("</g>\n");
        s
    }
}
