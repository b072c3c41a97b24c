//! Dice-vs-β line plots written as standalone SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{level_name, MatrixTable};
use crate::error::{Error, Result};

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// `disc` and `cup` for the three-class task, `class<c>` otherwise.
pub fn class_name(class: usize, num_classes: usize) -> String {
    match (num_classes, class) {
        (3, 1) => "disc".into(),
        (3, 2) => "cup".into(),
        _ => format!("class{class}"),
    }
}

fn x_of(ratio: f64) -> f64 {
    LEFT + ratio * (WIDTH - LEFT - RIGHT)
}

fn y_of(dice: f64) -> f64 {
    HEIGHT - BOTTOM - dice * (HEIGHT - TOP - BOTTOM)
}

/// One line per (noise level, pretrain, strategy), points sorted by β.
/// Writes `dice_<class>.svg` per foreground class into `dir` and returns the
/// paths. Failed cells are left out.
pub fn plot_results(table: &MatrixTable, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut series: Vec<(String, Vec<(f64, Vec<f64>)>)> = Vec::new();
    for row in &table.rows {
        let Ok(report) = &row.outcome else { continue };
        let c = &row.cell;
        let name = format!(
            "{}{} ({})",
            c.strategy.label(),
            if c.pretrain { ", pretrain" } else { "" },
            level_name(c.noise_level)
        );
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((c.noise_ratio, report.dice.clone())),
            None => series.push((name, vec![(c.noise_ratio, report.dice.clone())])),
        }
    }
    if series.is_empty() {
        return Err(Error::Empty("no strategy results to plot".into()));
    }
    for (_, pts) in &mut series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for class in 1..table.num_classes {
        let name = class_name(class, table.num_classes);
        let svg = render(&series, class - 1, &name);
        let path = dir.join(format!("dice_{name}.svg"));
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

fn render(series: &[(String, Vec<(f64, Vec<f64>)>)], idx: usize, class: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">Dice ({class}) vs noise ratio</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (x, y) = (x_of(v), y_of(v));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
            WIDTH - RIGHT
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, LEFT - 6.0, y + 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{v:.1}</text>"#,
            HEIGHT - BOTTOM + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">β</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 12.0
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|(r, d)| format!("{},{}", x_of(*r), y_of(d[idx])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for (r, d) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="3" fill="{color}" data-series="{name}" data-ratio="{r}" data-dice="{}"/>"#,
                x_of(*r),
                y_of(d[idx]),
                d[idx]
            );
        }
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, lx + 24.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalcli::tests::table3;
    use crate::evalcli::write_matrix_csv;

    #[test]
    fn table3_gives_disc_and_cup_plots() {
        let dir = tempfile::tempdir().unwrap();
        let paths = plot_results(&table3(), dir.path()).unwrap();
        let names: Vec<String> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["dice_disc.svg", "dice_cup.svg"]);
    }

    #[test]
    fn empty_table_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let t = MatrixTable {
            num_classes: 3,
            rows: Vec::new(),
        };
        assert!(plot_results(&t, dir.path()).is_err());
    }

    #[test]
    fn plotted_points_equal_csv_values() {
        let dir = tempfile::tempdir().unwrap();
        let table = table3();
        let paths = plot_results(&table, dir.path()).unwrap();
        let csv_path = dir.path().join("m.csv");
        write_matrix_csv(&table, &csv_path).unwrap();
        let mut r = csv::Reader::from_path(&csv_path).unwrap();
        let csv_disc: Vec<String> = r.records().map(|x| x.unwrap()[6].to_string()).collect();

        let svg = fs::read_to_string(&paths[0]).unwrap();
        let mut plotted: Vec<String> = svg
            .split("data-dice=\"")
            .skip(1)
            .map(|rest| rest[..rest.find('"').unwrap()].to_string())
            .collect();
        let mut expected = csv_disc;
        plotted.sort();
        expected.sort();
        assert_eq!(plotted, expected);
    }
}
