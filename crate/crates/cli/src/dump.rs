//! Flat dataset dumps: one sample per row,
//! `sample,client,<label | y0..yD>,x0..xK`. Reals use the shortest text
//! that reads back to the same bits.

use std::io::{BufRead, Write};

use anyhow::{bail, Context, Result};
use fedlora::tasks::{DatasetTargets, Partition};
use fedlora::{Dataset, Matrix};

pub fn write_dataset(out: &mut impl Write, data: &Dataset, partition: &Partition) -> Result<()> {
    let n = data.len();
    let mut owner = vec![usize::MAX; n];
    for (c, shard) in partition.shards.iter().enumerate() {
        for &i in shard {
            owner[i] = c;
        }
    }
    let k = data.input_dim();
    let mut cols = vec!["sample".to_string(), "client".to_string()];
    match &data.targets {
        DatasetTargets::Classes { .. } => cols.push("label".into()),
        DatasetTargets::Regression(y) => cols.extend((0..y.rows()).map(|i| format!("y{i}"))),
    }
    cols.extend((0..k).map(|i| format!("x{i}")));
    writeln!(out, "{}", cols.join(","))?;
    for j in 0..n {
        let mut row = vec![j.to_string(), owner[j].to_string()];
        match &data.targets {
            DatasetTargets::Classes { labels, .. } => row.push(labels[j].to_string()),
            DatasetTargets::Regression(y) => {
                row.extend((0..y.rows()).map(|i| y.get(i, j).to_string()))
            }
        }
        row.extend((0..k).map(|i| data.inputs.get(i, j).to_string()));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads a dump back. `classes` is needed for labelled dumps because the
/// file only lists the labels that occur.
pub fn read_dataset(input: impl BufRead, classes: Option<usize>) -> Result<(Dataset, Partition)> {
    let mut lines = input.lines();
    let header = lines.next().context("empty dump")??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample" || cols[1] != "client" {
        bail!(
            "not a dataset dump: header starts with {:?}",
            &cols[..cols.len().min(2)]
        );
    }
    let labelled = cols[2] == "label";
    let n_targets = if labelled {
        1
    } else {
        cols.iter().filter(|c| c.starts_with('y')).count()
    };
    let k = cols.len() - 2 - n_targets;

    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut shards: Vec<Vec<usize>> = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            bail!(
                "row {} has {} fields, expected {}",
                line_no + 1,
                fields.len(),
                cols.len()
            );
        }
        let j: usize = fields[0]
            .parse()
            .with_context(|| format!("bad sample index on row {}", line_no + 1))?;
        if j != xs.len() {
            bail!(
                "samples must be listed in order; row {} holds sample {j}",
                line_no + 1
            );
        }
        let client: usize = fields[1].parse()?;
        if client >= shards.len() {
            shards.resize(client + 1, Vec::new());
        }
        shards[client].push(j);
        let reals = |s: &[&str]| {
            s.iter()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
        };
        if labelled {
            labels.push(fields[2].parse::<usize>()?);
        } else {
            ys.push(reals(&fields[2..2 + n_targets])?);
        }
        xs.push(reals(&fields[2 + n_targets..])?);
    }
    let n = xs.len();
    if n == 0 {
        bail!("dump has no samples");
    }
    let inputs = Matrix::from_fn(k, n, |i, j| xs[j][i]);
    let targets = if labelled {
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        DatasetTargets::Classes { labels, classes }
    } else {
        DatasetTargets::Regression(Matrix::from_fn(n_targets, n, |i, j| ys[j][i]))
    };
    let partition = Partition { shards };
    partition.validate(n)?;
    Ok((Dataset::new(inputs, targets)?, partition))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedlora::linalg::{EntityKind, RngStream};
    use fedlora::tasks::{
        make_classification, make_regression, partition_dirichlet, partition_iid,
    };

    #[test]
    fn regression_round_trip_is_exact() {
        let mut rng = RngStream::new(4, EntityKind::Test, 0, 0);
        let data: Dataset = make_regression(30, 3, 2, 0.1, &mut rng).unwrap();
        let part = partition_iid(30, 4, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data, &part).unwrap();
        let (back, back_part) = read_dataset(&buf[..], None).unwrap();
        assert_eq!(back, data);
        assert_eq!(back_part, part);
    }

    #[test]
    fn classification_round_trip() {
        let mut rng = RngStream::new(5, EntityKind::Test, 0, 0);
        let data: Dataset = make_classification(50, 4, 3, 2.0, &mut rng).unwrap();
        let part = partition_dirichlet(&data, 3, 0.5, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data, &part).unwrap();
        let (back, back_part) = read_dataset(&buf[..], Some(3)).unwrap();
        assert_eq!(back, data);
        assert_eq!(back_part, part);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(read_dataset(&b"a,b,c\n"[..], None).is_err());
        assert!(read_dataset(&b""[..], None).is_err());
    }
}
