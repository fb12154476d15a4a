//! Plain-text exports of factored models: the factor CSV, per-component
//! spatial layouts for heatmaps, and a total-variation smoothness score.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::grid::Grid;
use crate::model::FactoredModel;
use crate::tensor::Mat;

fn modes(m: &FactoredModel) -> [(&'static str, &Mat); 6] {
    [
        ("A", &m.dense.a),
        ("B", &m.dense.b),
        ("C", &m.dense.c),
        ("Us", &m.sparse.a),
        ("Vs", &m.sparse.b),
        ("Ws", &m.sparse.c),
    ]
}

fn spatial_modes(m: &FactoredModel) -> [(&'static str, &Mat, Grid); 4] {
    [
        ("B", &m.dense.b, m.grid_b),
        ("Vs", &m.sparse.b, m.grid_b),
        ("C", &m.dense.c, m.grid_c),
        ("Ws", &m.sparse.c, m.grid_c),
    ]
}

/// `mode,component,index,value`, one row per factor entry. Values use the
/// shortest round-trip formatting, so equal models give identical bytes.
pub fn factor_csv(m: &FactoredModel) -> String {
    let mut out = String::from("mode,component,index,value\n");
    for (name, mat) in modes(m) {
        for k in 0..mat.cols {
            for i in 0..mat.rows {
                out.push_str(&format!("{name},{k},{i},{}\n", mat.get(i, k)));
            }
        }
    }
    out
}

/// `component,row,col,value` for one spatial factor matrix.
pub fn layout_csv(mat: &Mat, grid: &Grid) -> String {
    let mut out = String::from("component,row,col,value\n");
    for k in 0..mat.cols {
        for i in 0..mat.rows {
            let (r, c) = grid.row_col(i);
            out.push_str(&format!("{k},{r},{c},{}\n", mat.get(i, k)));
        }
    }
    out
}

/// Sum of absolute differences over 4-neighbor pairs, divided by the
/// number of cells.
pub fn total_variation(values: &[f64], grid: &Grid) -> f64 {
    let mut tv = 0.0;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let v = values[grid.index(r, c)];
            if c + 1 < grid.cols {
                tv += (v - values[grid.index(r, c + 1)]).abs();
            }
            if r + 1 < grid.rows {
                tv += (v - values[grid.index(r + 1, c)]).abs();
            }
        }
    }
    tv / grid.cell_count() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothness {
    pub mode: &'static str,
    pub component: usize,
    pub total_variation: f64,
}

pub fn smoothness(m: &FactoredModel) -> Vec<Smoothness> {
    spatial_modes(m)
        .into_iter()
        .flat_map(|(mode, mat, grid)| {
            (0..mat.cols).map(move |k| Smoothness {
                mode,
                component: k,
                total_variation: total_variation(&mat.column(k), &grid),
            })
        })
        .collect()
}

/// Writes `factors.csv`, `layout_<mode>.csv` for each spatial mode and
/// `smoothness.csv` into `dir`.
pub fn export_all(m: &FactoredModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("factors.csv"), factor_csv(m))?;
    for (mode, mat, grid) in spatial_modes(m) {
        fs::write(dir.join(format!("layout_{mode}.csv")), layout_csv(mat, &grid))?;
    }
    let mut f = fs::File::create(dir.join("smoothness.csv"))?;
    writeln!(f, "mode,component,total_variation")?;
    for s in smoothness(m) {
        writeln!(f, "{},{},{}", s.mode, s.component, s.total_variation)?;
    }
    Ok(())
}
