use super::EvalReport;

/// SemanticKITTI raw label names.
pub fn semantic_kitti_name(class_id: u16) -> &'static str {
    match class_id {
        0 => "unlabeled",
        1 => "outlier",
        10 => "car",
        11 => "bicycle",
        13 => "bus",
        15 => "motorcycle",
        16 => "on-rails",
        18 => "truck",
        20 => "other-vehicle",
        30 => "person",
        31 => "bicyclist",
        32 => "motorcyclist",
        40 => "road",
        44 => "parking",
        48 => "sidewalk",
        49 => "other-ground",
        50 => "building",
        51 => "fence",
        52 => "other-structure",
        60 => "lane-marking",
        70 => "vegetation",
        71 => "trunk",
        72 => "terrain",
        80 => "pole",
        81 => "traffic-sign",
        99 => "other-object",
        252 => "moving-car",
        253 => "moving-bicyclist",
        254 => "moving-person",
        255 => "moving-motorcyclist",
        256 => "moving-on-rails",
        257 => "moving-bus",
        258 => "moving-truck",
        259 => "moving-other-vehicle",
        _ => "unknown",
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", x * 100.0)).unwrap_or_else(|| "-".into())
}

/// Classes as columns with IoU in percent, followed by the raw counts.
pub fn render_table(report: &EvalReport) -> String {
    let mut header = vec!["method".to_owned()];
    let mut row = vec!["annotated".to_owned()];
    for c in &report.classes {
        header.push(c.name.clone());
        row.push(pct(c.iou));
    }
    header.push("mean".into());
    row.push(pct(report.mean_iou));
    let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(k, (c, w))| if k == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };

    let mut out = String::new();
    out.push_str(&format!("IoU (%) over {} frames, {} points\n", report.frames, report.points_counted));
    out.push_str(&line(&header));
    out.push('\n');
    out.push_str(&line(&row));
    out.push_str("\n\n");
    out.push_str(&format!("{:<20} {:>5} {:>10} {:>10} {:>10} {:>7}  texts\n", "class", "id", "TP", "FP", "FN", "IoU"));
    for c in &report.classes {
        out.push_str(&format!(
            "{:<20} {:>5} {:>10} {:>10} {:>10} {:>7}  {}\n",
            c.name,
            c.class_id,
            c.tp,
            c.fp,
            c.fn_,
            pct(c.iou),
            c.texts.join(", ")
        ));
    }
    if !report.unevaluated.is_empty() {
        out.push_str(&format!("\nunevaluated class texts: {}\n", report.unevaluated.join(", ")));
    }
    let t = &report.timings;
    out.push_str(&format!(
        "\ntimings (ms): load {:.1}  fov {:.1}  count {:.1}  wall {:.1}\n",
        t.load_ms, t.fov_ms, t.count_ms, t.wall_ms
    ));
    out
}
