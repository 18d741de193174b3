//! `report`: top examples per component and coefficient histograms, as CSV.
//! The output depends only on the input files, so reruns are byte-identical.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use npeff::eval::{histogram, top_examples, DEFAULT_TOP_N};
use serde::Serialize;

use super::evaluate::emit;
use crate::instance::{check_alignment, read_decomposition, read_pefs};
use crate::settings::Settings;
use crate::CliError;

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long, value_name = "FILE.npfd")]
    decomposition: PathBuf,
    /// PEFs supplying example ids and labels for the rows.
    #[arg(long, value_name = "FILE.npef")]
    pefs: Option<PathBuf>,
    /// Directory receiving `top_examples.csv` and `histograms.csv`.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Serialize)]
struct TopRow {
    component: usize,
    rank: usize,
    row: usize,
    example_id: u64,
    coefficient: f64,
    label: Option<i64>,
}

#[derive(Serialize)]
struct BinRow {
    component: usize,
    bin: usize,
    lower: f64,
    upper: f64,
    count: usize,
}

pub fn run(args: &ReportArgs, settings: &Settings) -> Result<(), CliError> {
    let dec = read_decomposition(&args.decomposition)?;
    let top_n = settings.pick(args.top_n, "top_n", DEFAULT_TOP_N)?;
    let bins = settings.pick(args.bins, "bins", 20)?;
    if bins == 0 {
        return Err(CliError::Usage("--bins must be positive".into()));
    }
    let (ids, labels) = match &args.pefs {
        Some(path) => {
            let set = read_pefs(path)?;
            check_alignment(&dec, &set)?;
            (set.example_ids(), set.labels().map(<[i64]>::to_vec))
        }
        None if !dec.example_ids.is_empty() => (dec.example_ids.clone(), None),
        None => ((0..dec.n() as u64).collect(), None),
    };
    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;

    let mut top = csv::Writer::from_writer(Vec::new());
    let mut hist = csv::Writer::from_writer(Vec::new());
    for j in 0..dec.rank() {
        for (rank, row) in top_examples(&dec.w, j, top_n.min(dec.n()))?.into_iter().enumerate() {
            top.serialize(TopRow {
                component: j,
                rank,
                row,
                example_id: ids[row],
                coefficient: dec.w[[row, j]],
                label: labels.as_ref().map(|l| l[row]),
            })?;
        }
        let column = dec.w.column(j).to_vec();
        for (bin, b) in histogram(&column, bins).into_iter().enumerate() {
            hist.serialize(BinRow {
                component: j,
                bin,
                lower: b.lower,
                upper: b.upper,
                count: b.count,
            })?;
        }
    }
    for (name, writer) in [("top_examples.csv", top), ("histograms.csv", hist)] {
        let bytes = writer.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
        emit(&bytes, Some(&args.out_dir.join(name)))?;
    }
    Ok(())
}
