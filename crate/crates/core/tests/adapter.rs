use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use charedit_core::engine::{Engine, Scale};
use charedit_core::semantic::adapter::{serve, RemoteStack};
use charedit_core::semantic::{Embedder, Renderer};
use charedit_core::solver::{create, edit, SolveConfig};

#[test]
fn remote_stack_matches_local_bit_for_bit() {
    let local = Engine::synthetic(Scale::Desk, 3).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (r, e) = (local.renderer.clone(), local.embedder.clone());
    thread::spawn(move || serve(listener, r, e));

    let remote = Arc::new(RemoteStack::connect(addr).unwrap());
    assert_eq!(remote.param_dim(), local.schema.len());
    let adapted = Engine::synthetic(Scale::Desk, 3)
        .unwrap()
        .with_backends(remote.clone() as Arc<dyn Renderer>, remote as Arc<dyn Embedder>);

    let cfg = SolveConfig { steps: 20, ..Default::default() };
    let a = create("bigger nose", &cfg, &local.models()).unwrap();
    let b = create("bigger nose", &cfg, &adapted.models()).unwrap();
    assert_eq!(a.to_json(), b.to_json());

    let mask = local.schema.label_mask(["eyes"]);
    let a = edit(&a.x_final, "wider eyes", 0.6, &mask, &cfg, &local.models()).unwrap();
    let b = edit(&b.x_final, "wider eyes", 0.6, &mask, &cfg, &adapted.models()).unwrap();
    assert!(a.x_final.bit_identical(&b.x_final));
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn dimension_mismatch_is_reported() {
    let local = Engine::synthetic(Scale::Desk, 3).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (r, e) = (local.renderer.clone(), local.embedder.clone());
    thread::spawn(move || serve(listener, r, e));
    let remote = RemoteStack::connect(addr).unwrap();
    let wrong = charedit_core::schema::ParameterVector::from_vec(vec![0.0; 3]);
    assert!(remote.render(&wrong).is_err());
}

#[test]
fn connect_to_closed_port_fails() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    assert!(RemoteStack::connect(port).is_err());
}
