//! Dataset ingestion, per-channel min-max normalization, and sliding-window
//! slicing.
//!
//! The on-disk format is comma-separated numeric text with one time step per
//! row and one column per channel, plus an optional single-column 0/1 label
//! file. Values are printed with the shortest round-trip `f64` formatting, so
//! load→save is a byte-level fixed point.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// An N-channel, T-step series with optional labels and normalization stats.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    /// N×T: one row per channel.
    pub values: Matrix,
    /// Per-step 0/1 anomaly labels, length T.
    pub labels: Option<Vec<u8>>,
    /// Present when the source file had a header (or the generator named
    /// channels); `save_csv` writes it back.
    pub channel_names: Option<Vec<String>>,
    /// Per-channel (min, max) fitted on a training split.
    pub norm_stats: Option<Vec<(f64, f64)>>,
}

impl TimeSeriesDataset {
    pub fn new(values: Matrix) -> Self {
        TimeSeriesDataset {
            values,
            labels: None,
            channel_names: None,
            norm_stats: None,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One N×l slice ending at (0-based) time step `end_step`.
///
/// Column `j` holds time step `end_step + 1 - l + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSlice {
    pub end_step: usize,
    pub values: Matrix,
}

/// Load a CSV series, transposing to channels-by-time.
///
/// A header row is assumed when the first line has any cell that does not
/// parse as a number. Labels are one `0`/`1` per line and must match the
/// series length.
pub fn load_csv(path: &Path, labels_path: Option<&Path>) -> Result<TimeSeriesDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_csv(&text)?;
    if let Some(lp) = labels_path {
        let ltext = fs::read_to_string(lp).map_err(|e| Error::io(lp, e))?;
        ds.labels = Some(parse_labels(&ltext, ds.len())?);
    }
    Ok(ds)
}

pub fn parse_csv(text: &str) -> Result<TimeSeriesDataset> {
    let mut lines = text.lines().enumerate().peekable();
    let (_, first) = match lines.peek() {
        Some(&(i, l)) => (i, l),
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };

    let first_cells: Vec<&str> = first.split(',').collect();
    let n_channels = first_cells.len();
    let has_header = first_cells
        .iter()
        .any(|c| c.trim().parse::<f64>().is_err());
    let channel_names = if has_header {
        lines.next();
        Some(first_cells.iter().map(|c| c.trim().to_string()).collect())
    } else {
        None
    };

    let mut rows: Vec<f64> = Vec::new();
    let mut n_steps = 0usize;
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_channels {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {n_channels} columns, found {}", cells.len()),
            });
        }
        for cell in cells {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("not a number: {cell:?}"),
            })?;
            rows.push(v);
        }
        n_steps += 1;
    }
    if n_steps == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }

    // rows is T×N in reading order; store as N×T.
    let step_major = Matrix::from_vec(n_steps, n_channels, rows);
    let mut ds = TimeSeriesDataset::new(step_major.transpose());
    ds.channel_names = channel_names;
    Ok(ds)
}

pub fn parse_labels(text: &str, expected_len: usize) -> Result<Vec<u8>> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        match line.trim() {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        }
    }
    if labels.len() != expected_len {
        return Err(Error::Parse {
            line: labels.len() + 1,
            msg: format!(
                "label length {} does not match series length {expected_len}",
                labels.len()
            ),
        });
    }
    Ok(labels)
}

/// Render the series back to CSV text (one step per row).
pub fn format_csv(ds: &TimeSeriesDataset) -> String {
    let mut out = String::new();
    if let Some(names) = &ds.channel_names {
        out.push_str(&names.join(","));
        out.push('\n');
    }
    for t in 0..ds.len() {
        for n in 0..ds.n_channels() {
            if n > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", ds.values.get(n, t));
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    fs::write(path, format_csv(ds)).map_err(|e| Error::io(path, e))
}

pub fn save_labels(labels: &[u8], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 2);
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fit per-channel (min, max) statistics. Needs at least 2 steps.
pub fn fit_normalizer(train: &TimeSeriesDataset) -> Result<Vec<(f64, f64)>> {
    if train.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "normalizer needs at least 2 steps, got {}",
            train.len()
        )));
    }
    let mut stats = Vec::with_capacity(train.n_channels());
    for n in 0..train.n_channels() {
        let row = train.values.row(n);
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            mn = mn.min(v);
            mx = mx.max(v);
        }
        stats.push((mn, mx));
    }
    Ok(stats)
}

/// Min-max map each channel to [0, 1] with the given training statistics.
///
/// Values outside the training range clip to [0, 1]; a constant channel maps
/// to all zeros.
pub fn apply_normalizer(ds: &TimeSeriesDataset, stats: &[(f64, f64)]) -> Result<TimeSeriesDataset> {
    if stats.len() != ds.n_channels() {
        return Err(Error::shape(
            "apply_normalizer",
            format!("{} channels", ds.n_channels()),
            format!("{} stats", stats.len()),
        ));
    }
    let mut values = ds.values.clone();
    for n in 0..ds.n_channels() {
        let (mn, mx) = stats[n];
        let span = mx - mn;
        for v in values.row_mut(n) {
            *v = if span > 0.0 {
                ((*v - mn) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Ok(TimeSeriesDataset {
        values,
        labels: ds.labels.clone(),
        channel_names: ds.channel_names.clone(),
        norm_stats: Some(stats.to_vec()),
    })
}

/// Sliding windows of width `l`; consecutive windows are `stride` steps apart.
///
/// Yields `⌊(T-l)/stride⌋ + 1` slices; the window with `end_step` t covers
/// steps `t-l+1..=t`.
pub fn make_windows(ds: &TimeSeriesDataset, l: usize, stride: usize) -> Result<Vec<WindowSlice>> {
    let t_len = ds.len();
    if l == 0 || l > t_len {
        return Err(Error::InvalidArg(format!(
            "window length {l} must be in 1..={t_len}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArg("stride must be >= 1".into()));
    }
    let n = ds.n_channels();
    let count = (t_len - l) / stride + 1;
    let mut windows = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let mut values = Matrix::zeros(n, l);
        for ch in 0..n {
            for j in 0..l {
                values.set(ch, j, ds.values.get(ch, start + j));
            }
        }
        windows.push(WindowSlice {
            end_step: start + l - 1,
            values,
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_transposed_to_channels_by_time() {
        let ds = parse_csv("1,2\n3,4\n5,6\n").unwrap();
        assert_eq!(ds.n_channels(), 2);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.values.row(0), &[1.0, 3.0, 5.0]);
        assert_eq!(ds.values.row(1), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(parse_csv("").is_err());
        assert!(parse_csv("a,b\n").is_err()); // header only, no data
    }

    #[test]
    fn ragged_and_non_numeric_rows_name_the_line() {
        match parse_csv("1,2\n3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_csv("1,2\n3,x\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_round_trips() {
        let text = "cpu,mem\n0.5,0.25\n1.5,0.75\n";
        let ds = parse_csv(text).unwrap();
        assert_eq!(
            ds.channel_names.as_deref(),
            Some(&["cpu".to_string(), "mem".to_string()][..])
        );
        assert_eq!(format_csv(&ds), text);
    }

    #[test]
    fn label_length_mismatch_is_an_error() {
        assert!(parse_labels("0\n1\n", 3).is_err());
        assert!(parse_labels("0\n2\n", 2).is_err());
        assert_eq!(parse_labels("0\n1\n1\n", 3).unwrap(), vec![0, 1, 1]);
    }

    #[test]
    fn min_max_definition() {
        let ds = TimeSeriesDataset::new(Matrix::from_rows(&[vec![0.0, 5.0, 10.0]]));
        let stats = fit_normalizer(&ds).unwrap();
        assert_eq!(stats, vec![(0.0, 10.0)]);
        let out = apply_normalizer(&ds, &stats).unwrap();
        assert_eq!(out.values.row(0), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let ds = TimeSeriesDataset::new(Matrix::from_rows(&[vec![7.0, 7.0, 7.0]]));
        let stats = fit_normalizer(&ds).unwrap();
        let out = apply_normalizer(&ds, &stats).unwrap();
        assert_eq!(out.values.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_test_values_clip() {
        let train = TimeSeriesDataset::new(Matrix::from_rows(&[vec![0.0, 10.0]]));
        let stats = fit_normalizer(&train).unwrap();
        let test = TimeSeriesDataset::new(Matrix::from_rows(&[vec![12.0, -3.0]]));
        let out = apply_normalizer(&test, &stats).unwrap();
        assert_eq!(out.values.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_pipeline_is_idempotent() {
        let ds = TimeSeriesDataset::new(Matrix::from_rows(&[
            vec![1.0, 3.0, 2.0, 9.0],
            vec![4.0, 4.0, 4.0, 4.0],
        ]));
        let once = apply_normalizer(&ds, &fit_normalizer(&ds).unwrap()).unwrap();
        let twice = apply_normalizer(&once, &fit_normalizer(&once).unwrap()).unwrap();
        assert_eq!(once.values, twice.values);
    }

    #[test]
    fn window_count_and_boundaries() {
        let ds = TimeSeriesDataset::new(Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]));
        let ws = make_windows(&ds, 3, 1).unwrap();
        assert_eq!(ws.len(), 3);
        assert_eq!(
            ws.iter().map(|w| w.end_step).collect::<Vec<_>>(),
            vec![2, 3, 4]
        );
        assert_eq!(ws[1].values.row(0), &[2.0, 3.0, 4.0]);

        // T == l gives exactly one window.
        let one = make_windows(&ds, 5, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].end_step, 4);

        assert!(make_windows(&ds, 6, 1).is_err());
        assert!(make_windows(&ds, 3, 0).is_err());
    }

    proptest! {
        /// Count and content match explicit index arithmetic.
        #[test]
        fn windows_match_index_oracle(t_len in 1usize..40, l in 1usize..40, stride in 1usize..5) {
            prop_assume!(l <= t_len);
            let series: Vec<f64> = (0..t_len).map(|i| i as f64).collect();
            let ds = TimeSeriesDataset::new(Matrix::from_rows(&[series]));
            let ws = make_windows(&ds, l, stride).unwrap();
            prop_assert_eq!(ws.len(), (t_len - l) / stride + 1);
            for (w_idx, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.end_step, w_idx * stride + l - 1);
                for j in 0..l {
                    // Channel value encodes its time index.
                    prop_assert_eq!(w.values.get(0, j), (w.end_step + 1 - l + j) as f64);
                }
            }
        }

        /// For stride 1, every step t >= l-1 is the end of exactly one window.
        #[test]
        fn stride_one_is_a_bijection_on_window_ends(t_len in 1usize..60, l in 1usize..60) {
            prop_assume!(l <= t_len);
            let ds = TimeSeriesDataset::new(Matrix::from_rows(&[vec![0.0; t_len]]));
            let ws = make_windows(&ds, l, 1).unwrap();
            let mut seen = vec![0usize; t_len];
            for w in &ws {
                seen[w.end_step] += 1;
            }
            for (t, count) in seen.iter().enumerate() {
                prop_assert_eq!(*count, usize::from(t + 1 >= l), "step {}", t);
            }
        }

        /// Shortest round-trip formatting makes save∘load a fixed point.
        #[test]
        fn csv_save_load_fixed_point(values in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
            let n = 2;
            prop_assume!(values.len() % n == 0);
            let t_len = values.len() / n;
            let ds = TimeSeriesDataset::new(Matrix::from_vec(n, t_len, values));
            let text1 = format_csv(&ds);
            let reloaded = parse_csv(&text1).unwrap();
            prop_assert_eq!(&reloaded.values, &ds.values);
            prop_assert_eq!(format_csv(&reloaded), text1);
        }
    }
}
