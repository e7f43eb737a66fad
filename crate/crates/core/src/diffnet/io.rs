//! Text model format:
//!
//! ```text
//! PINNMODEL 1
//! <layer widths, space separated>
//! <t_lo t_hi x_lo.. x_hi.. u_lo.. u_hi..>
//! <one parameter per line, layout order>
//! ```
//!
//! Floats are written with the shortest representation that round-trips.

use std::fmt::Write as _;
use std::path::Path;

use super::{InputScaling, NetworkParams, NetworkSpec};
use crate::error::{Error, Result};

const HEADER: &str = "PINNMODEL 1";

pub fn to_string(spec: &NetworkSpec, params: &NetworkParams, scaling: &InputScaling) -> String {
    let n = spec.output_dim();
    let lo = scaling.lower();
    let hi = scaling.upper();
    let mut s = String::with_capacity(params.len() * 24 + 128);
    s.push_str(HEADER);
    s.push('\n');
    let widths: Vec<String> = spec.widths().iter().map(|w| w.to_string()).collect();
    s.push_str(&widths.join(" "));
    s.push('\n');
    let blocks = [
        &lo[0..1],
        &hi[0..1],
        &lo[1..1 + n],
        &hi[1..1 + n],
        &lo[1 + n..],
        &hi[1 + n..],
    ];
    let bounds: Vec<String> = blocks.iter().flat_map(|b| b.iter().map(|v| format!("{v:?}"))).collect();
    s.push_str(&bounds.join(" "));
    s.push('\n');
    for v in params.as_slice() {
        let _ = writeln!(s, "{v:?}");
    }
    s
}

pub fn from_str(text: &str) -> Result<(NetworkSpec, NetworkParams, InputScaling)> {
    let bad = |msg: &str| Error::ModelFormat(msg.to_string());
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(bad("missing PINNMODEL 1 header"));
    }
    let widths = lines
        .next()
        .ok_or_else(|| bad("missing widths line"))?
        .split_whitespace()
        .map(|w| w.parse::<usize>().map_err(|_| bad("bad layer width")))
        .collect::<Result<Vec<_>>>()?;
    let spec = NetworkSpec::new(widths)?;
    let n = spec.output_dim();
    let d = spec.input_dim();
    if d < 1 + n {
        return Err(bad("input width must cover time and state"));
    }
    let m = d - 1 - n;
    let bounds = lines
        .next()
        .ok_or_else(|| bad("missing scaling line"))?
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| bad("bad scaling bound")))
        .collect::<Result<Vec<_>>>()?;
    if bounds.len() != 2 * d {
        return Err(bad("scaling line must hold 2 x input-width bounds"));
    }
    let (t_lo, t_hi) = (bounds[0], bounds[1]);
    let x_lo = &bounds[2..2 + n];
    let x_hi = &bounds[2 + n..2 + 2 * n];
    let u_lo = &bounds[2 + 2 * n..2 + 2 * n + m];
    let u_hi = &bounds[2 + 2 * n + m..];
    let scaling = InputScaling::from_domains((t_lo, t_hi), x_lo, x_hi, u_lo, u_hi)?;
    let values = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|_| bad("bad parameter value")))
        .collect::<Result<Vec<_>>>()?;
    let params = NetworkParams::new(&spec, values)?;
    Ok((spec, params, scaling))
}

pub fn save(path: &Path, spec: &NetworkSpec, params: &NetworkParams, scaling: &InputScaling) -> Result<()> {
    std::fs::write(path, to_string(spec, params, scaling))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(NetworkSpec, NetworkParams, InputScaling)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ModelFormat(format!("{}: {e}", path.display())))?;
    from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(vals in proptest::collection::vec(-1e3f64..1e3, 4 * 3 + 3 + 3 * 2 + 2)) {
            let spec = NetworkSpec::new(vec![4, 3, 2]).unwrap();
            let params = NetworkParams::new(&spec, vals).unwrap();
            let scaling = InputScaling::from_domains((0.0, 0.25), &[-2.0, -1.0], &[2.0, 1.0], &[-1.0], &[1.0]).unwrap();
            let text = to_string(&spec, &params, &scaling);
            let (s2, p2, sc2) = from_str(&text).unwrap();
            prop_assert_eq!(s2, spec);
            prop_assert_eq!(p2, params);
            prop_assert_eq!(sc2, scaling);
        }
    }

    #[test]
    fn rejects_malformed() {
        assert!(from_str("PINNMODEL 2\n").is_err());
        assert!(from_str("PINNMODEL 1\n4 3 2\n0 1\n").is_err());
        let spec = NetworkSpec::new(vec![2, 1, 1]).unwrap();
        let params = NetworkParams::zeros(&spec);
        let scaling = InputScaling::identity(2);
        let mut text = to_string(&spec, &params, &scaling);
        text.push_str("0.5\n");
        assert!(from_str(&text).is_err());
    }
}
