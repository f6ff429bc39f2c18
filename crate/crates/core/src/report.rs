//! Stable CSV rendering of per-epoch metrics.

use crate::ffw::MetricsRow;
use crate::theory::fmt_g17;
use std::io::{self, Write};

pub const METRICS_HEADER: &str = "epoch,split,tau,J,task_loss,mi_loss,task_acc,bias_acc,sparsity";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch,
            r.split,
            fmt_g17(r.tau),
            r.j,
            r.task_loss,
            r.mi_loss,
            r.task_acc,
            r.bias_acc,
            r.sparsity
        )?;
    }
    Ok(())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}
