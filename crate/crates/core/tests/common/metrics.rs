use lytnet::evaluation::{f1_score, precision_recall_f1, EvalRecord};
use lytnet::training::Endpoints;
use lytnet::LightClass;

/// `(precision, recall, printed F1)` from the published per-class tables;
/// the first five are fractions, the rest percentages.
pub const PUBLISHED: [(f64, f64, f64); 9] = [
    (0.97, 0.96, 0.96),
    (0.94, 0.94, 0.94),
    (0.99, 0.96, 0.97),
    (0.86, 0.92, 0.89),
    (0.92, 0.87, 0.89),
    (96.24, 92.23, 94.19),
    (98.83, 92.15, 95.37),
    (96.67, 86.43, 91.26),
    (98.03, 91.30, 94.55),
];

pub fn record(predicted: LightClass, actual: LightClass) -> EvalRecord {
    let e = Endpoints::new(0.5, 0.9, 0.5, 0.5);
    EvalRecord {
        predicted,
        actual,
        predicted_endpoints: e,
        actual_endpoints: Some(e),
        obstructed: false,
    }
}

pub fn published_f1() -> Result<(), String> {
    for (p, r, printed) in PUBLISHED {
        let f = f1_score(p, r);
        if (f - printed).abs() > 0.01 {
            return Err(format!("P {p} R {r}: F1 {f}, printed {printed}"));
        }
        if (f1_score(r, p) - f).abs() > 1e-12 {
            return Err(format!("P {p} R {r}: not symmetric"));
        }
    }
    Ok(())
}

/// Red at P = 0.97 and R = 0.96 built from counts: 9312 hits, 288 false
/// alarms, 388 misses.
pub fn red_from_counts() -> Result<(), String> {
    let (hits, false_alarms, misses) = (9312, 288, 388);
    let mut records = vec![record(LightClass::Red, LightClass::Red); hits];
    records.extend(vec![record(LightClass::Red, LightClass::Green); false_alarms]);
    records.extend(vec![record(LightClass::Green, LightClass::Red); misses]);
    let red = &precision_recall_f1(&records).map_err(|e| e.to_string())?[LightClass::Red.index()];
    let (p, r, f) = (red.precision.unwrap(), red.recall.unwrap(), red.f1.unwrap());
    if (p - 0.97).abs() > 1e-12 || (r - 0.96).abs() > 1e-12 {
        return Err(format!("P {p} R {r}"));
    }
    if (f - 0.96).abs() > 0.01 {
        return Err(format!("F1 {f}"));
    }
    Ok(())
}

pub fn all() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![("published F1 values", published_f1), ("red F1 from counts", red_from_counts)]
}
