//! CSV and PGM artifacts.

use std::fmt::Write as _;

use paed_core::evaluation::EvalReport;
use paed_core::labelspace::CategorySet;
use paed_core::training::EpochLog;
use paed_core::{NdBuffer, Real};

/// `name,TP,FP,FN,P,R,F1` per category, then a `micro` row from pooled
/// counts and a `macro` row holding the mean per-category F1.
pub fn per_class_csv(report: &EvalReport, set: &CategorySet) -> String {
    let mut out = String::from("name,TP,FP,FN,P,R,F1\n");
    for (c, counts) in report.per_class.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4}",
            set.name(c),
            counts.tp,
            counts.fp,
            counts.fn_,
            counts.precision(),
            counts.recall(),
            counts.f1()
        )
        .unwrap();
    }
    let m = &report.micro;
    writeln!(
        out,
        "micro,{},{},{},{:.4},{:.4},{:.4}",
        m.tp,
        m.fp,
        m.fn_,
        m.precision(),
        m.recall(),
        m.f1()
    )
    .unwrap();
    writeln!(out, "macro,,,,,,{:.4}", report.macro_f1).unwrap();
    out
}

/// `degree,frames,F1`, one row per overlap degree.
pub fn by_degree_csv(report: &EvalReport) -> String {
    let mut out = String::from("degree,frames,F1\n");
    for d in &report.by_degree {
        writeln!(out, "{},{},{:.4}", d.degree, d.frames, d.f1()).unwrap();
    }
    out
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,step,train_loss,val_microF1\n");
    for e in log {
        writeln!(
            out,
            "{},{},{:.6},{:.4}",
            e.epoch, e.step, e.train_loss, e.val_micro_f1
        )
        .unwrap();
    }
    out
}

/// Rows of a rank-1 or rank-2 buffer as comma-separated values, printed
/// with enough digits to round-trip.
pub fn grid_csv<S: Real>(values: &NdBuffer<S>) -> String {
    let cols = *values.shape().last().unwrap_or(&1);
    let mut out = String::new();
    for row in values.data().chunks(cols.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// 8-bit binary PGM of values in `[0, 1]`, scaled by 255. Rank-2 `(T, F)`
/// grids are drawn with time to the right and frequency upwards; rank-1
/// vectors become a single row.
pub fn pgm<S: Real>(values: &NdBuffer<S>) -> Vec<u8> {
    let level = |v: S| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    let (width, height, pixels): (usize, usize, Vec<u8>) = match *values.shape() {
        [t, f] => {
            let d = values.data();
            let px = (0..f)
                .rev()
                .flat_map(|j| (0..t).map(move |i| level(d[i * f + j])))
                .collect();
            (t, f, px)
        }
        _ => (
            values.len(),
            1,
            values.data().iter().map(|&v| level(v)).collect(),
        ),
    };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}
