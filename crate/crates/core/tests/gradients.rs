mod common;

use common::model_fd_check;
use remotenet::model::{ArchConfig, Variant};

fn mini(v: Variant, filters: usize) -> ArchConfig {
    ArchConfig::variant(v).with_frames(5).with_resolution(12, 20).with_filters(filters)
}

fn check(v: Variant, filters: usize) {
    let r = model_fd_check(&mini(v, filters), 11, 200, 1e-2);
    eprintln!("{} f{filters}: checked {} nontrivial {} skipped {} worst {:.2e}", v.name(), r.checked, r.nontrivial, r.skipped, r.worst);
    assert_eq!(r.checked, 200, "{r:?}");
    assert!(r.nontrivial > 0, "{r:?}");
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
}

#[test]
fn full_model_sta_t() {
    check(Variant::FdDStaT, 4);
}

#[test]
fn full_model_sta_t_wide() {
    check(Variant::FdDStaT, 8);
}

#[test]
fn full_model_sta_nt() {
    check(Variant::FdDStaNt, 4);
}

#[test]
fn full_model_c3d() {
    check(Variant::C3d, 4);
}

#[test]
fn full_model_sta_t_wide_frame() {
    // pool5 keeps a 2x2 map, so off-center taps of the late layers carry gradient
    let cfg = ArchConfig::variant(Variant::FdDStaT).with_frames(5).with_resolution(40, 64).with_filters(8);
    let r = model_fd_check(&cfg, 3, 200, 1e-2);
    eprintln!("wide frame: checked {} nontrivial {} skipped {} worst {:.2e}", r.checked, r.nontrivial, r.skipped, r.worst);
    assert_eq!(r.checked, 200, "{r:?}");
    assert!(r.nontrivial >= 50, "{r:?}");
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
}
