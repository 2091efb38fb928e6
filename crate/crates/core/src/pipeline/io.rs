use std::io::Write;

use super::{EnsemblePrediction, TimingRow};

/// `id,y_mean,y_std`, one row per prediction.
pub fn write_predictions<W: Write>(out: W, preds: &[EnsemblePrediction]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "id,y_mean,y_std")?;
    for p in preds {
        writeln!(w, "{},{},{}", p.id, p.mean, p.std)?;
    }
    w.flush()
}

/// `epoch,mse` with epochs numbered from 1.
pub fn write_loss_history<W: Write>(out: W, history: &[f64]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "epoch,mse")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    w.flush()
}

/// `length,mode,seconds`, followed by an `all,ratio,<value>` summary row
/// when `ratio` is given.
pub fn write_timings<W: Write>(out: W, rows: &[TimingRow], ratio: Option<f64>) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "length,mode,seconds")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.length, r.mode.as_str(), r.seconds)?;
    }
    if let Some(ratio) = ratio {
        writeln!(w, "all,ratio,{ratio}")?;
    }
    w.flush()
}
