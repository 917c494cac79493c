//! Line-delimited sample files.
//!
//! ```text
//! # esmc-samples v1 schema=<hash> calibrated=<0|1> fields=<k>
//! <user> <item> <session> <rec|search> <c> <a> <o> <feat_0> ... <feat_{k-1}> <cart_origin>
//! ```
//!
//! Fields are separated by single spaces. Labels are `0`/`1`; `cart_origin`
//! is `-1` when no cart label was relocated into the sample.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Domain, InteractionSample};
use crate::{Error, Result};

pub const FORMAT_TAG: &str = "esmc-samples";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleHeader {
    pub schema_hash: String,
    pub calibrated: bool,
    pub n_fields: usize,
}

pub fn write_samples(path: &Path, schema_hash: &str, samples: &[InteractionSample]) -> Result<()> {
    let calibrated = samples.first().is_some_and(|s| s.calibrated);
    if samples.iter().any(|s| s.calibrated != calibrated) {
        return Err(Error::Input("cannot mix raw and calibrated samples in one file".into()));
    }
    let n_fields = samples.first().map_or(0, |s| s.feature_ids.len());
    if let Some(s) = samples.iter().find(|s| s.feature_ids.len() != n_fields) {
        return Err(Error::Input(format!(
            "sample ({}, {}, {}) has {} feature ids, expected {n_fields}",
            s.user_id,
            s.item_id,
            s.session_id,
            s.feature_ids.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "# {FORMAT_TAG} v{FORMAT_VERSION} schema={schema_hash} calibrated={} fields={n_fields}",
        u8::from(calibrated)
    )?;
    for s in samples {
        write!(
            w,
            "{} {} {} {} {} {} {}",
            s.user_id,
            s.item_id,
            s.session_id,
            s.domain,
            u8::from(s.click),
            u8::from(s.cart),
            u8::from(s.purchase)
        )?;
        for f in &s.feature_ids {
            write!(w, " {f}")?;
        }
        match s.cart_origin_session {
            Some(o) => writeln!(w, " {o}")?,
            None => writeln!(w, " -1")?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<(SampleHeader, Vec<InteractionSample>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header_line = lines.next().ok_or_else(|| err(1, "empty file".into()))??;
    let header = parse_header(&header_line).map_err(|m| err(1, m))?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let s = parse_line(&line, &header).map_err(|m| err(lineno, m))?;
        samples.push(s);
    }
    Ok((header, samples))
}

fn parse_header(line: &str) -> std::result::Result<SampleHeader, String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#") || parts.next() != Some(FORMAT_TAG) {
        return Err(format!("missing `# {FORMAT_TAG}` header"));
    }
    let version = parts.next().unwrap_or("");
    if version != format!("v{FORMAT_VERSION}") {
        return Err(format!("unsupported format version `{version}`"));
    }
    let (mut schema_hash, mut calibrated, mut n_fields) = (None, None, None);
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad header entry `{kv}`"))?;
        match k {
            "schema" => schema_hash = Some(v.to_string()),
            "calibrated" => calibrated = Some(parse_bit(v)?),
            "fields" => n_fields = Some(v.parse::<usize>().map_err(|e| format!("fields: {e}"))?),
            other => return Err(format!("unknown header key `{other}`")),
        }
    }
    Ok(SampleHeader {
        schema_hash: schema_hash.ok_or("header lacks schema=")?,
        calibrated: calibrated.ok_or("header lacks calibrated=")?,
        n_fields: n_fields.ok_or("header lacks fields=")?,
    })
}

fn parse_bit(v: &str) -> std::result::Result<bool, String> {
    match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("expected 0 or 1, got `{v}`")),
    }
}

fn parse_line(line: &str, header: &SampleHeader) -> std::result::Result<InteractionSample, String> {
    let tok: Vec<&str> = line.split(' ').collect();
    let expected = 8 + header.n_fields;
    if tok.len() != expected {
        return Err(format!("expected {expected} fields, found {}", tok.len()));
    }
    let int = |i: usize, what: &str| -> std::result::Result<u32, String> {
        tok[i].parse::<u32>().map_err(|e| format!("{what} `{}`: {e}", tok[i]))
    };
    let domain: Domain = tok[3].parse().map_err(|e: Error| e.to_string())?;
    let feature_ids = (0..header.n_fields)
        .map(|f| int(7 + f, "feature id"))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let origin = tok[expected - 1];
    let cart_origin_session = if origin == "-1" {
        None
    } else {
        Some(int(expected - 1, "cart origin")?)
    };
    Ok(InteractionSample {
        user_id: int(0, "user")?,
        item_id: int(1, "item")?,
        session_id: int(2, "session")?,
        feature_ids,
        domain,
        click: parse_bit(tok[4])?,
        cart: parse_bit(tok[5])?,
        purchase: parse_bit(tok[6])?,
        calibrated: header.calibrated,
        cart_origin_session,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_sample(calibrated: bool) -> impl Strategy<Value = InteractionSample> {
        (
            any::<u32>(),
            any::<u32>(),
            any::<u32>(),
            proptest::collection::vec(any::<u32>(), 3),
            any::<bool>(),
            (any::<bool>(), any::<bool>(), any::<bool>()),
            proptest::option::of(any::<u32>()),
        )
            .prop_map(move |(u, i, s, f, search, (c, a, o), origin)| InteractionSample {
                user_id: u,
                item_id: i,
                session_id: s,
                feature_ids: f,
                domain: if search { Domain::Search } else { Domain::Rec },
                click: c,
                cart: a,
                purchase: o,
                calibrated,
                cart_origin_session: origin,
            })
    }

    proptest! {
        #[test]
        fn round_trip(cal in any::<bool>(), samples in proptest::collection::vec(arb_sample(false), 1..40)) {
            let samples: Vec<_> = samples.into_iter().map(|mut s| { s.calibrated = cal; s }).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.txt");
            write_samples(&path, "abc", &samples).unwrap();
            let (header, back) = read_samples(&path).unwrap();
            prop_assert_eq!(header.schema_hash, "abc");
            prop_assert_eq!(header.calibrated, cal);
            prop_assert_eq!(back, samples);
        }
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        std::fs::write(
            &path,
            "# esmc-samples v1 schema=x calibrated=0 fields=1\n1 2 3 rec 1 0 0 4 -1\n1 2 4 rec 1\n",
        )
        .unwrap();
        match read_samples(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        std::fs::write(&path, "user item\n").unwrap();
        assert!(matches!(read_samples(&path), Err(Error::Parse { line: 1, .. })));
    }
}
