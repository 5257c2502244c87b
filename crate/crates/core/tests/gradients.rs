use spikenorm::audit::{self, Audit};

const TRIALS: u64 = 100;
const TOL: f64 = 1e-5;

fn assert_within(a: Audit) {
    assert!(a.checks > 0, "{}: nothing checked", a.name);
    assert!(a.max_rel_error < TOL, "{}: {} ({})", a.name, a.max_rel_error, a.worst);
}

#[test]
fn temporal_convolution() {
    assert_within(audit::temporal_convolution(TRIALS).unwrap());
}

#[test]
fn weighted_layers() {
    assert_within(audit::weighted_layers(TRIALS).unwrap());
}

#[test]
fn normalizers_every_form_and_axis() {
    assert_within(audit::normalizers(TRIALS).unwrap());
}

#[test]
fn spike_count_loss_gradient() {
    assert_within(audit::spike_count_loss_grad(TRIALS).unwrap());
}

#[test]
fn end_to_end_networks() {
    assert_within(audit::networks().unwrap());
}
