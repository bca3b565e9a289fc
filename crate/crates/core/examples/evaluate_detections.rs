//! Greedy matching, per-domain F1 and all-points AP on a hand-made
//! example, written to `report.json`, `report.csv` and `pr_curve.csv` in the
//! directory given as the first argument.

use mitodet::data::{Annotation, AnnotationLabel, ImageRecord};
use mitodet::detect::{calibrate_threshold, Detection, DetectionSet};
use mitodet::eval::{dataset_ap, match_all, per_domain_report};

fn record(id: &str, domain: &str, mitoses: &[(f64, f64)]) -> ImageRecord {
    ImageRecord {
        id: id.into(),
        file: format!("{id}.png").into(),
        domain: domain.into(),
        width: 512,
        height: 512,
        annotations: mitoses
            .iter()
            .map(|&(x, y)| Annotation { x, y, label: AnnotationLabel::MitoticFigure })
            .collect(),
    }
}

fn det(x: f64, y: f64, score: f32) -> Detection {
    Detection { x, y, score }
}

fn main() -> mitodet::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "eval-out".into()));
    std::fs::create_dir_all(&out).expect("output directory");
    let records = vec![
        record("a", "scanner-1", &[(100.0, 100.0), (300.0, 300.0)]),
        record("b", "scanner-2", &[(50.0, 400.0)]),
        record("c", "scanner-2", &[]),
    ];
    let sets = vec![
        // A near hit, a duplicate on the same mitosis and a miss.
        DetectionSet::new("a", vec![det(110.0, 95.0, 0.95), det(104.0, 100.0, 0.60), det(420.0, 40.0, 0.70)]),
        DetectionSet::new("b", vec![det(55.0, 390.0, 0.80)]),
        DetectionSet::new("c", vec![det(200.0, 200.0, 0.30)]),
    ];

    let results = match_all(&sets, &records, 30.0)?;
    let report = per_domain_report(&results, &records)?;
    for r in report.rows.iter().chain([&report.overall]) {
        println!("{:<10} tp {} fp {} fn {} F1 {:.3}", r.domain, r.tp, r.fp, r.fn_, r.f1);
    }
    let curve = dataset_ap(&sets, &records, 30.0)?;
    println!("AP {:.3} over {} thresholds", curve.ap, curve.points.len());
    let cal = calibrate_threshold(&sets, &records, 30.0)?;
    println!("best threshold {:.2} gives F1 {:.3}", cal.threshold, cal.f1);

    report.save(out.join("report.json"), out.join("report.csv"))?;
    curve.save_csv(out.join("pr_curve.csv"))?;
    Ok(())
}
