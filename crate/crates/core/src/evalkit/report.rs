//! Tabular output: CSV files and aligned plain-text tables.

use std::path::Path;

use super::{EvalError, EvalReport};

/// Renders a header plus rows as CSV text.
pub fn csv_string(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers).expect("in-memory csv");
    for row in rows {
        w.write_record(row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv input is utf-8")
}

pub fn write_csv(path: &Path, headers: &[&str], rows: &[Vec<String>]) -> Result<(), EvalError> {
    std::fs::write(path, csv_string(headers, rows))?;
    Ok(())
}

/// Columns padded to their widest cell; numbers right-aligned.
pub fn format_aligned(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let numeric = |s: &str| s.parse::<f64>().is_ok();
    let render = |cells: Vec<&str>| {
        let line: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| {
                if numeric(c) {
                    format!("{c:>w$}")
                } else {
                    format!("{c:<w$}")
                }
            })
            .collect();
        line.join("  ").trim_end().to_string()
    };
    let mut out = render(headers.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&render(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub const IOU_HEADERS: [&str; 4] = ["class", "iou", "intersection", "union"];

/// One row per label (background first) followed by a summary row.
pub fn iou_rows(report: &EvalReport, class_names: &[&str]) -> Vec<Vec<String>> {
    let counts = &report.iou.counts;
    let mut rows: Vec<Vec<String>> = report
        .iou
        .per_class
        .iter()
        .enumerate()
        .map(|(label, v)| {
            let name = match label {
                0 => "background".to_string(),
                l => class_names
                    .get(l - 1)
                    .map_or_else(|| format!("class{}", l - 1), |s| s.to_string()),
            };
            vec![
                name,
                v.map_or_else(|| "n/a".into(), |x| format!("{x:.6}")),
                counts.intersection[label].to_string(),
                counts.union[label].to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "mean".into(),
        format!("{:.6}", report.iou.miou),
        counts.intersection.iter().sum::<u64>().to_string(),
        counts.union.iter().sum::<u64>().to_string(),
    ]);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_table_shapes() {
        let rows = vec![
            vec!["a".to_string(), "1.5".into()],
            vec!["long name".into(), "10".into()],
        ];
        assert_eq!(csv_string(&["k", "v"], &rows), "k,v\na,1.5\nlong name,10\n");
        let table = format_aligned(&["k", "v"], &rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "a          1.5");
        assert_eq!(lines[3], "long name   10");
    }

    #[test]
    fn csv_quotes_when_needed() {
        assert_eq!(csv_string(&["x"], &[vec!["a,b".into()]]), "x\n\"a,b\"\n");
    }
}
