use maco_core::models::net::probe_param_gradients;

fn main() {
    probe_param_gradients();
}
