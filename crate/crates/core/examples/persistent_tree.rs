//! Builds a persistent segment tree, applies a few updates and answers
//! range-minimum queries against old versions.

use pmp::pst::VersionedTree;

fn main() -> pmp::Result<()> {
    let mut tree = VersionedTree::build(&[7, 3, 9, 12, 5])?;
    println!("version 0: {} nodes", tree.node_count());

    for (index, value) in [(1, 14), (4, 1), (1, 2)] {
        let v = tree.update(index, value)?;
        println!(
            "version {v}: a[{index}] = {value}, copied path {:?}, {} nodes",
            tree.update_path(index)?,
            tree.node_count()
        );
    }

    for v in 0..tree.version_count() {
        let min = tree.query_min(v, 0, 4)?;
        let cover = tree.canonical_cover(v, 1, 3)?;
        println!(
            "version {v}: array {:?}, min[0..=4] = {min}, cover of [1, 3] = {cover:?}",
            tree.snapshot_array(v)?
        );
    }

    let checked = pmp::pst::check_against_brute_force(&[7, 3, 9, 12, 5], &[(1, 14), (4, 1), (1, 2)])?;
    println!("{checked} historical queries agree with brute force");
    Ok(())
}
