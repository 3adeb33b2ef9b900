//! `gen`: materialize a manifest's partitions as files, one per
//! (table, node), reproducible byte for byte from the generator seed.

use std::path::Path;

use shardjoin_core::config::{TABLE_R, TABLE_S};
use shardjoin_core::workload::{generate_partition, partition_file_name, write_partition, GenSpec};
use shardjoin_core::{ClusterConfig, Result};

use crate::manifest::Manifest;

/// Write every partition file for one concrete cluster into `dir`.
pub fn write_point_partitions(
    cfg: &ClusterConfig,
    gen_r: &GenSpec,
    gen_s: &GenSpec,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for node in 0..cfg.num_nodes() {
        for (table, spec) in [(TABLE_R, gen_r), (TABLE_S, gen_s)] {
            let part = generate_partition(spec, table, node);
            write_partition(&dir.join(partition_file_name(table, node)), &part)?;
        }
    }
    Ok(())
}

pub fn cmd_gen(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let m = Manifest::load(spec_path)?;
    if m.sweep.is_some() {
        eprintln!("gen: manifest sweep ignored; generating the base configuration only");
    }
    let cfg = m.base_cfg().clone();
    let pts = {
        // Reuse the single-point expansion so pool defaults match orchestrate.
        let mut m2 = m;
        m2.sweep = None;
        m2.points()?
    };
    let pt = &pts[0];
    write_point_partitions(&pt.cfg, &pt.gen_r, &pt.gen_s, out_dir)?;
    println!(
        "gen: wrote {} partition files ({} nodes, {} + {} tuples per node) to {}",
        2 * cfg.num_nodes(),
        cfg.num_nodes(),
        cfg.partition_size_r,
        cfg.partition_size_s,
        out_dir.display()
    );
    Ok(())
}
