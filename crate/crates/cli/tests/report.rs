use stdfnc::dfnc::DomainPartition;
use stdfnc::eval::{classification_metrics, ConfusionCounts, MetricsRecord};
use stdfnc_cli::report::{diverging_color, heatmap_svg, metrics_csv, read_metrics_csv, METRICS_HEADER};

fn record(tp: usize, fp: usize, tn: usize, fn_: usize) -> MetricsRecord {
    classification_metrics(&ConfusionCounts { tp, fp, tn, fn_ }).unwrap()
}

#[test]
fn metrics_table_layout() {
    let csv = metrics_csv(&[record(4, 0, 6, 0)]).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fold,acc,f1,precision,spec,sens");
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines[1], "1,100.00,100.00,100.00,100.00,100.00");
    assert_eq!(lines[2], "mean,100.00,100.00,100.00,100.00,100.00");
    assert_eq!(lines[3], "sd,0.00,0.00,0.00,0.00,0.00");
    assert!(metrics_csv(&[]).is_err());
}

#[test]
fn summary_rows_follow_the_fold_rows() {
    let records = [record(3, 1, 4, 2), record(5, 2, 3, 0), record(0, 0, 8, 2), record(6, 1, 2, 1), record(2, 2, 4, 2)];
    let csv = metrics_csv(&records).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 7);
    for (i, row) in rows.iter().take(5).enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
    }
    for k in 1..6 {
        let vals: Vec<f64> = rows[..5].iter().map(|r| r[k].parse().unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / 5.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let shown_mean: f64 = rows[5][k].parse().unwrap();
        let shown_sd: f64 = rows[6][k].parse().unwrap();
        assert!((shown_mean - mean).abs() <= 0.005 + 1e-9, "column {k}: {shown_mean} vs {mean}");
        assert!((shown_sd - var.sqrt()).abs() <= 0.005 + 1e-9);
        assert!(rows.iter().all(|r| r[k].split('.').nth(1).unwrap().len() == 2));
    }

    let path = std::env::temp_dir().join(format!("stdfnc-metrics-{}.csv", std::process::id()));
    std::fs::write(&path, &csv).unwrap();
    let back = read_metrics_csv(&path).unwrap();
    assert_eq!(back.len(), 5);
    assert_eq!(back[0], records[0].columns());
    std::fs::remove_file(path).unwrap();
}

/// White-to-endpoint blend, computed channel by channel.
fn color_oracle(v: f64, bound: f64) -> String {
    let white = [255.0, 255.0, 255.0];
    let (end, share) = if v < 0.0 { ([33.0, 102.0, 172.0], (-v / bound).min(1.0)) } else { ([178.0, 24.0, 43.0], (v / bound).min(1.0)) };
    let mut out = String::from("#");
    for k in 0..3 {
        let c: f64 = white[k] * (1.0 - share) + end[k] * share;
        out.push_str(&format!("{:02x}", c.round() as u8));
    }
    out
}

fn cells(svg: &str) -> Vec<(String, f64)> {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    doc.descendants()
        .filter(|n| n.has_tag_name("rect") && n.attribute("class") == Some("cell"))
        .map(|n| (n.attribute("fill").unwrap().to_string(), n.attribute("data-value").unwrap().parse().unwrap()))
        .collect()
}

#[test]
fn heatmap_structure() {
    let part = DomainPartition::from_sizes(&[("A", 1), ("B", 1)]).unwrap();
    let svg = heatmap_svg(&[1.0, 0.2, 0.2, 1.0], 2, &part, 1.0, "identity <2x2>").unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(cells(&svg).len(), 4);
    let lines = doc.descendants().filter(|n| n.has_tag_name("line")).count();
    assert_eq!(lines, 2);
    let labels: Vec<&str> = doc.descendants().filter(|n| n.has_tag_name("text")).filter_map(|n| n.text()).collect();
    assert_eq!(labels.iter().filter(|t| **t == "A").count(), 2);
    assert_eq!(labels.iter().filter(|t| **t == "B").count(), 2);
    assert!(labels.contains(&"identity <2x2>"));
    assert!(doc.descendants().any(|n| n.attribute("class") == Some("colorbar")));

    assert!(heatmap_svg(&[1.0, 0.0, 0.0], 2, &part, 1.0, "").is_err());
    assert!(heatmap_svg(&[0.0; 9], 3, &part, 1.0, "").is_err());
    assert!(heatmap_svg(&[0.0; 4], 2, &part, 0.0, "").is_err());
}

#[test]
fn colormap_endpoints() {
    assert_eq!(diverging_color(0.0, 2.0), [255, 255, 255]);
    assert_eq!(diverging_color(2.0, 2.0), [178, 24, 43]);
    assert_eq!(diverging_color(-2.0, 2.0), [33, 102, 172]);
    assert_eq!(diverging_color(5.0, 2.0), diverging_color(2.0, 2.0));
    assert_eq!(diverging_color(-5.0, 2.0), diverging_color(-2.0, 2.0));
}

#[test]
fn cell_colors_match_interpolation_oracle() {
    let n = 9;
    let part = DomainPartition::from_sizes(&[("SM", 3), ("VS", 4), ("CC", 2)]).unwrap();
    let matrix: Vec<f64> = (0..n * n).map(|k| (k as f64 * 0.37).sin() * 1.7).collect();
    let svg = heatmap_svg(&matrix, n, &part, 1.5, "oracle").unwrap();
    let c = cells(&svg);
    assert_eq!(c.len(), n * n);
    for (k, (fill, v)) in c.iter().enumerate() {
        assert_eq!(*v, matrix[k]);
        assert_eq!(fill, &color_oracle(matrix[k], 1.5), "cell {k} value {}", matrix[k]);
    }
}
