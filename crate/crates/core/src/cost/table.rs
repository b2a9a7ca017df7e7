//! CSV, aligned-text and JSON renderings of a [`CostReport`]. Output is
//! UTF-8 with LF line endings and a fixed column order.

use super::CostReport;
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 6] = [
    "name",
    "kind",
    "params",
    "macs",
    "flops",
    "activation_bytes",
];

fn cells(report: &CostReport) -> Vec<[String; 6]> {
    report
        .rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                r.kind.as_str().to_string(),
                r.params.to_string(),
                r.macs.to_string(),
                r.flops.to_string(),
                report.activation_bytes(r).to_string(),
            ]
        })
        .collect()
}

pub fn render_csv(report: &CostReport) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(COLUMNS).map_err(fmt)?;
    for row in cells(report) {
        w.write_record(&row).map_err(fmt)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Name and kind left-aligned, numbers right-aligned, followed by a totals
/// block.
pub fn render_text(report: &CostReport) -> String {
    let body = cells(report);
    let mut width = COLUMNS.map(str::len);
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: &[String]| -> String {
        let mut s = String::new();
        for (i, c) in row.iter().enumerate() {
            let pad = width[i] - c.chars().count();
            if i > 0 {
                s.push_str("  ");
            }
            if i < 2 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(&COLUMNS.map(String::from));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
        out.push('\n');
    }
    if !report.rows.is_empty() {
        let t = report.totals;
        let m = report.memory;
        out.push_str(&format!(
            "\ntotal params        {}\ntotal MACs          {}\ntotal FLOPs         {}\npeak memory (bytes) {}\npeak memory (GiB)   {:.3}\n",
            t.params,
            t.macs,
            t.flops,
            m.total_bytes,
            m.gib()
        ));
        if let Some(c) = &report.co2 {
            out.push_str(&format!("CO2 (kg)            {:.2}\n", c.kg_co2));
        }
    }
    out
}

pub fn render_json(report: &CostReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{analyze, LayerCost, LayerKind};
    use crate::model::ModelConfig;

    #[test]
    fn empty_report_is_header_only() {
        let r = CostReport::from_rows(Vec::new(), [32, 32, 32], 1, 4);
        assert_eq!(
            render_csv(&r).unwrap(),
            "name,kind,params,macs,flops,activation_bytes\n"
        );
        assert_eq!(render_text(&r).lines().count(), 1);
    }

    #[test]
    fn single_row_round_trips_through_csv() {
        let row = LayerCost {
            name: "encoder.stage1.down.conv".into(),
            kind: LayerKind::Conv,
            params: 220,
            macs: 110_592,
            flops: 221_184,
            activations: 2048,
        };
        let r = CostReport::from_rows(vec![row.clone()], [32, 32, 32], 1, 4);
        let text = render_csv(&r).unwrap();
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let recs: Vec<csv::StringRecord> = rd.records().map(|x| x.unwrap()).collect();
        assert_eq!(recs.len(), 1);
        assert_eq!(&recs[0][0], row.name);
        assert_eq!(&recs[0][1], "conv");
        assert_eq!(recs[0][2].parse::<u64>().unwrap(), row.params);
        assert_eq!(recs[0][3].parse::<u64>().unwrap(), row.macs);
        assert_eq!(recs[0][4].parse::<u64>().unwrap(), row.flops);
        assert_eq!(recs[0][5].parse::<u64>().unwrap(), 2048 * 4);
    }

    #[test]
    fn output_is_stable() {
        let cfg = ModelConfig::reduced([8, 16, 32, 64], 4);
        let a = analyze(&cfg, [32, 32, 32], 1, 4).unwrap();
        let b = analyze(&cfg, [32, 32, 32], 1, 4).unwrap();
        assert_eq!(render_csv(&a).unwrap(), render_csv(&b).unwrap());
        assert_eq!(render_text(&a), render_text(&b));
        assert_eq!(render_json(&a).unwrap(), render_json(&b).unwrap());
        assert!(!render_text(&a).contains('\r'));
        let parsed: CostReport = serde_json::from_str(&render_json(&a).unwrap()).unwrap();
        assert_eq!(parsed, a);
    }
}
