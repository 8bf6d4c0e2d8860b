//! Dataset CSV files: header `x_0,…,x_{d-1},y,e`, one example per row.

use std::path::Path;

use crate::dataset::{Dataset, LabeledExample};
use crate::error::{Error, Result};

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn check_header(path: &Path, header: &csv::StringRecord) -> Result<usize> {
    let n = header.len();
    if n < 3 {
        return Err(parse_error(path, 1, "header needs at least one feature column plus y and e"));
    }
    let d = n - 2;
    for (i, name) in header.iter().take(d).enumerate() {
        if name.trim() != format!("x_{i}") {
            return Err(parse_error(path, 1, format!("column {i} should be 'x_{i}', found '{name}'")));
        }
    }
    if header[d].trim() != "y" || header[d + 1].trim() != "e" {
        return Err(parse_error(path, 1, "last two columns must be 'y' and 'e'"));
    }
    Ok(d)
}

pub fn read_csv<R: std::io::Read>(reader: R, path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_error(path, 1, e.to_string()))?,
        None => return Err(parse_error(path, 1, "empty file")),
    };
    let d = check_header(path, &header)?;
    let mut examples = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != d + 2 {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", d + 2, rec.len()),
            ));
        }
        let mut x = Vec::with_capacity(d);
        for (i, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, format!("x_{i}: '{field}' is not a number")))?;
            x.push(v);
        }
        let int = |name: &str, field: &str| -> Result<usize> {
            field
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, format!("{name}: '{field}' is not a nonnegative integer")))
        };
        let y = int("y", &rec[d])?;
        let e = int("e", &rec[d + 1])?;
        examples.push(LabeledExample::new(x, y, e));
    }
    Dataset::new(examples, None).map_err(|e| e.context(format!("loading {}", path.display())))
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).context(format!("opening {}", path.display())))?;
    read_csv(std::io::BufReader::new(file), path)
}

pub fn write_csv<W: std::io::Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = ds.input_dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    header.push("y".into());
    header.push("e".into());
    w.write_record(&header).map_err(csv_error)?;
    for ex in ds.examples() {
        // Display for f64 prints the shortest string that parses back exactly
        let mut row: Vec<String> = ex.x.iter().map(|v| v.to_string()).collect();
        row.push(ex.y.to_string());
        row.push(ex.e.to_string());
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::from(e).context(format!("creating {}", path.display())))?;
    write_csv(ds, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        read_csv(text.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn two_rows() {
        let ds = parse("x_0,x_1,y,e\n0.5,-1,1,0\n2,3e-3,0,2\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.example(1).x, vec![2.0, 0.003]);
        assert_eq!(ds.example(1).e, 2);
    }

    #[test]
    fn short_row_reports_its_line() {
        let err = parse("x_0,x_1,y,e\n0.5,-1,1,0\n2,0,1\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_values_report_line() {
        for (text, want) in [
            ("x_0,y,e\nabc,1,0\n", 2),
            ("x_0,y,e\n1,1,0\n1,-1,0\n", 3),
            ("x_0,y,e\n1,1,0.5\n", 2),
        ] {
            match parse(text).unwrap_err() {
                Error::Parse { line, .. } => assert_eq!(line, want, "{text}"),
                other => panic!("unexpected {other}"),
            }
        }
    }

    #[test]
    fn bad_header() {
        assert!(matches!(parse("a,b,c\n1,0,0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("x_0,e,y\n1,0,0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse(""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn round_trip_is_exact() {
        let ex = vec![
            LabeledExample::new(vec![0.1, -1e-300, 1.0 / 3.0], 0, 4),
            LabeledExample::new(vec![f64::MAX, 123456.789, -0.0], 2, 1),
        ];
        let ds = Dataset::new(ex, None).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), Path::new("rt")).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in ds.examples().iter().zip(back.examples()) {
            assert_eq!(a.x, b.x);
            assert_eq!((a.y, a.e), (b.y, b.e));
        }
    }
}
