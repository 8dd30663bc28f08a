//! Compare IoU, AP and prototype assignment with slow reference versions.

use cpfs3d::oracle::run_oracle_suite;

fn main() {
    let r = run_oracle_suite(7, 200, 50);
    println!(
        "IoU        {} instances, max error {:e}",
        r.iou_instances, r.iou_max_error
    );
    println!(
        "AP         {} instances, max error {:e}",
        r.ap_instances, r.ap_max_error
    );
    println!(
        "assignment {} instances, {} mismatches",
        r.assign_instances, r.assign_mismatches
    );
}
