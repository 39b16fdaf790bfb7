// Running checksum over a batch of invoice records.
pub fn checksum(records: &[Record]) -> u64 {
    let mut acc: u64 = 0;
    // EVOLVE-BLOCK-START
    for r in records {
        acc = acc.wrapping_add(r.weight());
    }
    // end-of-body
    // EVOLVE-BLOCK-END
    acc
}
