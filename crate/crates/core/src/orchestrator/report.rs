//! Coverage reports from campaign logs.

use std::fmt::Write as _;

use crate::fuzz::campaign::LOG_HEADER;
use crate::fuzz::LogRow;

#[derive(Debug, thiserror::Error)]
#[error("log line {line}: {msg}")]
pub struct LogError {
    pub line: usize,
    pub msg: String,
}

pub fn parse_log(text: &str) -> Result<Vec<LogRow>, LogError> {
    let mut rows = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || (i == 0 && l == LOG_HEADER) {
            continue;
        }
        let err = |msg: &str| LogError { line: i + 1, msg: msg.to_string() };
        let f: Vec<u64> = l.split(',').map(|x| x.parse::<u64>().map_err(|_| err("bad number"))).collect::<Result<_, _>>()?;
        if f.len() != 4 {
            return Err(err("expected 4 fields"));
        }
        rows.push(LogRow { timestamp: f[0], execs: f[1], bb_count: f[2] as usize, models_deployed: f[3] as usize });
    }
    Ok(rows)
}

pub fn coverage_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("elapsed,execs,bb_count,models_deployed\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Final-coverage comparison of two campaigns.
pub fn compare(name_a: &str, a: &[LogRow], name_b: &str, b: &[LogRow]) -> String {
    let last = |r: &[LogRow]| r.last().copied().unwrap_or(LogRow { timestamp: 0, execs: 0, bb_count: 0, models_deployed: 0 });
    let (la, lb) = (last(a), last(b));
    let mut s = String::from("campaign,execs,bb_count,models_deployed\n");
    for (n, r) in [(name_a, la), (name_b, lb)] {
        writeln!(s, "{n},{},{},{}", r.execs, r.bb_count, r.models_deployed).unwrap();
    }
    writeln!(s, "delta,,{},", lb.bb_count as i64 - la.bb_count as i64).unwrap();
    s
}

/// Step plot of covered blocks over executions, one polyline per series.
pub fn svg(series: &[(&str, &[LogRow])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 40.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let max_x = series.iter().flat_map(|(_, r)| r.iter()).map(|r| r.execs).max().unwrap_or(0).max(1) as f64;
    let max_y = series.iter().flat_map(|(_, r)| r.iter()).map(|r| r.bb_count).max().unwrap_or(0).max(1) as f64;
    let x = |v: u64| M + (W - 2.0 * M) * v as f64 / max_x;
    let y = |v: usize| H - M - (H - 2.0 * M) * v as f64 / max_y;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{M},{} L{M},{} L{},{}" stroke="black" fill="none"/>"#,
        M,
        H - M,
        W - M,
        H - M
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">executions (max {})</text>"#, W / 2.0, H - 8.0, max_x)
        .unwrap();
    writeln!(s, r#"<text x="8" y="{}" font-size="12">blocks (max {})</text>"#, M - 12.0, max_y).unwrap();
    for (i, (name, rows)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts = Vec::new();
        let mut prev = 0usize;
        for r in rows.iter() {
            pts.push(format!("{:.1},{:.1}", x(r.execs), y(prev)));
            pts.push(format!("{:.1},{:.1}", x(r.execs), y(r.bb_count)));
            prev = r.bb_count;
        }
        writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none"/>"#, pts.join(" ")).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name}</text>"#, W - M - 120.0, M + 14.0 * i as f64)
            .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: u64, bbs: usize) -> LogRow {
        LogRow { timestamp: t, execs: t, bb_count: bbs, models_deployed: 0 }
    }

    #[test]
    fn empty_log_is_header_only() {
        let rows = parse_log(&format!("{LOG_HEADER}\n")).unwrap();
        assert_eq!(coverage_csv(&rows), "elapsed,execs,bb_count,models_deployed\n");
    }

    #[test]
    fn csv_is_deterministic_and_round_trips() {
        let rows = vec![row(1, 3), row(10, 5), row(20, 9)];
        let text = format!("{LOG_HEADER}\n1,1,3,0\n10,10,5,0\n20,20,9,0\n");
        assert_eq!(parse_log(&text).unwrap(), rows);
        assert_eq!(coverage_csv(&rows), coverage_csv(&parse_log(&text).unwrap()));
        assert!(parse_log("x,1\n").is_err());
    }

    #[test]
    fn compare_reports_delta() {
        let a = [row(5, 10)];
        let b = [row(5, 14)];
        assert!(compare("base", &a, "full", &b).ends_with("delta,,4,\n"));
        assert!(svg(&[("base", &a), ("full", &b)]).contains("<polyline"));
    }
}
