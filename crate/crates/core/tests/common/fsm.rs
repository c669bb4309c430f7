use lytnet::guidance::{GuidanceConfig, GuidanceOutput, GuidanceState, Light};
use lytnet::training::Endpoints;
use lytnet::LightClass;

pub fn base_endpoints() -> Endpoints {
    Endpoints::new(0.5, 2171.0 / 3024.0, 0.5, 1440.0 / 3024.0)
}

pub fn pure(class: LightClass) -> [f64; 5] {
    let mut p = [0.0; 5];
    p[class.index()] = 1.0;
    p
}

pub fn run(frames: &[[f64; 5]]) -> Vec<GuidanceOutput> {
    let mut s = GuidanceState::new(GuidanceConfig::default()).unwrap();
    frames.iter().map(|p| s.push_frame(p, base_endpoints()).unwrap()).collect()
}

/// Mode a full window of pure frames decides, counted in whole frames:
/// a mode wins only when all five frames belong to it.
fn expected_mode(window: &[LightClass]) -> Light {
    let group = |c: LightClass| match c {
        LightClass::Red => 0,
        LightClass::Green => 1,
        LightClass::CountdownGreen | LightClass::CountdownBlank => 2,
        LightClass::None => 3,
    };
    let modes = [Light::Red, Light::Green, Light::Countdown, Light::NoLight];
    for (g, mode) in modes.into_iter().enumerate() {
        let count = window.iter().filter(|&&c| group(c) == g).count();
        // count / 5 > 4 / 5
        if count * 5 > 4 * window.len() {
            return mode;
        }
    }
    Light::Uncertain
}

/// Every 5-frame pattern of pure frames over every ordered class pair.
pub fn exhaustive_pairs() -> Result<usize, String> {
    let mut cases = 0;
    for a in LightClass::ALL {
        for b in LightClass::ALL {
            if a == b {
                continue;
            }
            for bits in 0u32..32 {
                let classes: Vec<LightClass> = (0..5).map(|i| if bits >> i & 1 == 1 { b } else { a }).collect();
                let frames: Vec<[f64; 5]> = classes.iter().map(|&c| pure(c)).collect();
                let out = run(&frames);
                let want = expected_mode(&classes);
                let last = &out[4];
                if last.light != want {
                    return Err(format!("{classes:?}: got {:?}, want {want:?}", last.light));
                }
                if last.announce != (want != Light::Uncertain) {
                    return Err(format!("{classes:?}: announce {}", last.announce));
                }
                if out[..4].iter().any(|o| o.light != Light::Uncertain || o.announce) {
                    return Err(format!("{classes:?}: decided during warm-up"));
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}

/// Four red frames and one green average to exactly 0.8, which is not enough.
pub fn four_of_five() -> Result<(), String> {
    for odd in 0..5 {
        let frames: Vec<[f64; 5]> = (0..5)
            .map(|i| pure(if i == odd { LightClass::Green } else { LightClass::Red }))
            .collect();
        let out = run(&frames);
        if out[4].light != Light::Uncertain || out[4].announce {
            return Err(format!("odd frame {odd}: {:?}", out[4]));
        }
        if out[4].raw_class != LightClass::Red {
            return Err(format!("odd frame {odd}: raw class {:?}", out[4].raw_class));
        }
    }
    Ok(())
}

pub fn unanimous_announces_once() -> Result<(), String> {
    for class in LightClass::ALL {
        let out = run(&vec![pure(class); 20]);
        let announced: Vec<usize> = out.iter().enumerate().filter(|(_, o)| o.announce).map(|(i, _)| i).collect();
        if announced != [4] {
            return Err(format!("{class:?}: announced at {announced:?}"));
        }
        if out[4..].iter().any(|o| o.light != Light::of_class(class)) {
            return Err(format!("{class:?}: light drifted"));
        }
    }
    Ok(())
}

/// Neither countdown class clears the threshold alone; together they do.
pub fn countdown_merge() -> Result<(), String> {
    let p = [0.05, 0.05, 0.45, 0.40, 0.05];
    let out = run(&[p; 5]);
    if out[4].light != Light::Countdown || !out[4].announce {
        return Err(format!("{:?}", out[4]));
    }
    let split = [0.0, 0.0, 0.40, 0.40, 0.20];
    let out = run(&[split; 5]);
    if out[4].light != Light::Uncertain {
        return Err(format!("merged 0.8 decided: {:?}", out[4]));
    }
    Ok(())
}

pub fn warm_up() -> Result<(), String> {
    let out = run(&[pure(LightClass::Red); 5]);
    for (i, o) in out[..4].iter().enumerate() {
        if o.light != Light::Uncertain || o.announce || o.frames != i + 1 {
            return Err(format!("frame {}: {o:?}", i + 1));
        }
    }
    if out[4].light != Light::Red || !out[4].announce {
        return Err(format!("frame 5: {:?}", out[4]));
    }
    Ok(())
}

/// One stray frame in a steady stream drops the light to uncertain for a
/// window but never announces anything new.
pub fn single_aberrant_frame() -> Result<(), String> {
    for steady in LightClass::ALL {
        for stray in LightClass::ALL {
            if Light::of_class(stray) == Light::of_class(steady) {
                continue;
            }
            for at in 5..10 {
                let mut frames = vec![pure(steady); 16];
                frames[at] = pure(stray);
                let out = run(&frames);
                let extra = out.iter().enumerate().filter(|(i, o)| o.announce && *i != 4).count();
                if extra != 0 {
                    return Err(format!("{steady:?} with {stray:?} at {at}: re-announced"));
                }
            }
        }
    }
    Ok(())
}

pub fn all() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("4-of-5 stays uncertain", four_of_five),
        ("unanimous announces once", unanimous_announces_once),
        ("countdown merge at 0.85", countdown_merge),
        ("warm-up", warm_up),
        ("single aberrant frame", single_aberrant_frame),
        ("exhaustive pure patterns", || exhaustive_pairs().map(|_| ())),
    ]
}
