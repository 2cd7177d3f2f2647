//! Comparison grids: one row per input, columns input | T | R | residue | ground truth.

use std::path::{Path, PathBuf};

use dsrnet::{Error, Image, Result};

const GAP: usize = 4;

pub struct Row {
    pub panels: Vec<Option<Image>>,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_optional(path: &Path) -> Result<Option<Image>> {
    if path.is_file() {
        Image::load(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Ground truth for `<stem>_I.<ext>` is `<stem>_T.png` beside it, or in `gt_dir` if given.
fn ground_truth_path(input: &Path, gt_dir: Option<&Path>) -> Option<PathBuf> {
    let s = stem(input);
    let base = s.strip_suffix("_I").or_else(|| s.strip_suffix('I').filter(|b| b.is_empty()))?;
    let name = if base.is_empty() { "T.png".to_string() } else { format!("{base}_T.png") };
    let dir = gt_dir.map(Path::to_path_buf).or_else(|| input.parent().map(Path::to_path_buf))?;
    Some(dir.join(name))
}

/// Collects panels; `notes` receives layout remarks for stderr.
pub fn collect_rows(inputs: &[PathBuf], pred_dir: &Path, gt_dir: Option<&Path>, notes: &mut Vec<String>) -> Result<Vec<Row>> {
    if inputs.is_empty() {
        return Err(Error::Config("montage needs at least one input".into()));
    }
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        let s = stem(input);
        let mixed = Image::load(input)?;
        let t = Image::load(pred_dir.join(format!("{s}_T.png")))?;
        let r = Image::load(pred_dir.join(format!("{s}_R.png")))?;
        let residue = load_optional(&pred_dir.join(format!("{s}_residue.png")))?;
        let gt = match ground_truth_path(input, gt_dir) {
            Some(p) => load_optional(&p)?,
            None => None,
        };
        rows.push(Row {
            panels: vec![Some(mixed), Some(t), Some(r), residue, gt],
        });
    }
    let labels = ["input", "T", "R", "residue", "ground truth"];
    for (col, label) in labels.iter().enumerate().skip(3) {
        if rows.iter().all(|r| r.panels[col].is_none()) {
            notes.push(format!("{label} panel omitted: not found for any input"));
            for r in &mut rows {
                r.panels[col] = None;
            }
        } else if rows.iter().any(|r| r.panels[col].is_none()) {
            notes.push(format!("{label} panel left blank where missing"));
        }
    }
    Ok(rows)
}

/// Lays rows out on a white canvas. Columns absent from every row are dropped.
pub fn compose(rows: &[Row]) -> Result<Image> {
    let columns: Vec<usize> = (0..rows[0].panels.len())
        .filter(|&c| rows.iter().any(|r| r.panels[c].is_some()))
        .collect();
    let col_w: Vec<usize> = columns
        .iter()
        .map(|&c| rows.iter().filter_map(|r| r.panels[c].as_ref().map(Image::width)).max().unwrap_or(0))
        .collect();
    let row_h: Vec<usize> = rows
        .iter()
        .map(|r| r.panels.iter().flatten().map(Image::height).max().unwrap_or(0))
        .collect();
    let width = col_w.iter().sum::<usize>() + GAP * (columns.len() + 1);
    let height = row_h.iter().sum::<usize>() + GAP * (rows.len() + 1);
    let mut canvas = Image::filled(height, width, 1.0);
    let mut top = GAP;
    for (row, h) in rows.iter().zip(&row_h) {
        let mut left = GAP;
        for (&c, w) in columns.iter().zip(&col_w) {
            if let Some(p) = &row.panels[c] {
                for y in 0..p.height() {
                    for x in 0..p.width() {
                        for ch in 0..3 {
                            canvas.set(top + y, left + x, ch, p.get(y, x, ch));
                        }
                    }
                }
            }
            left += w + GAP;
        }
        top += h + GAP;
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_naming() {
        assert_eq!(ground_truth_path(Path::new("/d/a_I.png"), None), Some(PathBuf::from("/d/a_T.png")));
        assert_eq!(ground_truth_path(Path::new("/d/I.png"), None), Some(PathBuf::from("/d/T.png")));
        assert_eq!(ground_truth_path(Path::new("/d/photo.png"), None), None);
    }

    #[test]
    fn grid_dimensions() {
        let p = |h, w| Some(Image::filled(h, w, 0.5));
        let rows = vec![
            Row { panels: vec![p(8, 10), p(8, 10), p(8, 10), None, None] },
            Row { panels: vec![p(6, 10), p(6, 10), p(6, 10), None, None] },
        ];
        let img = compose(&rows).unwrap();
        assert_eq!(img.dims(), (8 + 6 + 3 * GAP, 30 + 4 * GAP));
    }
}
