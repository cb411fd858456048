use std::path::PathBuf;

use rand::rngs::StdRng;
use rand::SeedableRng;
use spotlease::bench::{dominant_system, random_matrix, Stack, StackConfig};
use spotlease::client::{InvocationError, Invoker, ModeHint, WaitMode};
use spotlease::functions::{
    black_scholes_call, bytes_to_f64s, encode_jacobi_full, encode_mmm_request, f64s_to_bytes, jacobi_rows,
    matmul_rows, OptionParams,
};
use spotlease::protocol::CodeSubmission;
use spotlease::transport::BackendKind;
use spotlease_demo_functions::SYMBOLS;

/// The shared object is built beside this test binary or one level up.
fn shared_object() -> Vec<u8> {
    let exe = std::env::current_exe().unwrap();
    let deps: PathBuf = exe.parent().unwrap().into();
    let name = format!(
        "{}spotlease_demo_functions{}",
        std::env::consts::DLL_PREFIX,
        std::env::consts::DLL_SUFFIX
    );
    [deps.join(&name), deps.parent().unwrap().join(&name)]
        .iter()
        .find_map(|p| std::fs::read(p).ok())
        .unwrap_or_else(|| panic!("{name} not found near {}", deps.display()))
}

const BUF: usize = 1 << 16;

fn call(inv: &Invoker, worker: usize, name: &str, payload: &[u8]) -> Result<Vec<u8>, InvocationError> {
    let input = inv.input(BUF).unwrap();
    let output = inv.output(BUF).unwrap();
    let n = input.fill(payload);
    let len = inv.submit_to(worker, name, &input, n, &output).unwrap().get(WaitMode::Blocking)?;
    let out = output.data()[..len].to_vec();
    Ok(out)
}

#[test]
fn shipped_object_matches_local_kernels() {
    for backend in [BackendKind::Loopback, BackendKind::Tcp] {
        let s = Stack::start(&StackConfig::new(backend, vec![2])).unwrap();
        let inv = s.target().invoker(true).unwrap();
        inv.allocate(&CodeSubmission::code_object(42, shared_object(), &SYMBOLS), BUF, ModeHint::WarmOk, 2)
            .unwrap();

        let payload: Vec<u8> = (0..=255u8).cycle().take(1500).collect();
        for worker in 0..2 {
            assert_eq!(call(&inv, worker, "echo", &payload).unwrap(), payload);
        }

        let options: Vec<OptionParams> = (0..100)
            .map(|i| OptionParams {
                spot: 90.0 + i as f64 * 0.2,
                strike: 100.0,
                rate: 0.02,
                volatility: 0.3,
                expiry: 0.5 + i as f64 / 100.0,
            })
            .collect();
        let prices = bytes_to_f64s(&call(&inv, 0, "blackscholes_batch", &OptionParams::encode_batch(&options)).unwrap());
        let oracle: Vec<f64> = options.iter().map(black_scholes_call).collect();
        assert_eq!(prices, oracle);

        let d = 16;
        let mut rng = StdRng::seed_from_u64(3);
        let (a, b) = (random_matrix(d, d, &mut rng), random_matrix(d, d, &mut rng));
        let rows = call(&inv, 1, "mmm_half", &encode_mmm_request(d, d, d, &a, &b, 0..d / 2)).unwrap();
        assert_eq!(bytes_to_f64s(&rows), matmul_rows(&a, &b, d, d, 0..d / 2));

        // the second call sends only x and relies on the worker's cached system
        let (a, rhs) = dominant_system(d, 9);
        let x0 = vec![0.0; d];
        let x1 = bytes_to_f64s(&call(&inv, 0, "jacobi_step", &encode_jacobi_full(d, 0..d, &a, &rhs, &x0)).unwrap());
        assert_eq!(x1, jacobi_rows(&a, &rhs, &x0, 0..d));
        let x2 = bytes_to_f64s(&call(&inv, 0, "jacobi_step", &f64s_to_bytes(&x1)).unwrap());
        assert_eq!(x2, jacobi_rows(&a, &rhs, &x1, 0..d));
        assert_eq!(call(&inv, 1, "jacobi_step", &f64s_to_bytes(&x1)), Err(InvocationError::FunctionError));

        assert_eq!(call(&inv, 0, "fail", &payload), Err(InvocationError::FunctionError));
        inv.deallocate();
        s.shutdown();
    }
}

#[test]
fn output_larger_than_client_buffer_overflows() {
    let s = Stack::start(&StackConfig::new(BackendKind::Loopback, vec![1])).unwrap();
    let inv = s.target().invoker(true).unwrap();
    inv.allocate(&CodeSubmission::code_object(5, shared_object(), &SYMBOLS), 4096, ModeHint::WarmOk, 1)
        .unwrap();
    let input = inv.input(4096).unwrap();
    let output = inv.output(2048).unwrap();
    let n = input.fill(&[1u8; 4000]);
    let r = inv.submit("echo", &input, n, &output).unwrap().get(WaitMode::Blocking);
    assert_eq!(r, Err(InvocationError::OutputOverflow));
    inv.deallocate();
    s.shutdown();
}

#[test]
fn missing_symbol_fails_allocation() {
    let s = Stack::start(&StackConfig::new(BackendKind::Loopback, vec![1])).unwrap();
    let inv = s.target().invoker(true).unwrap();
    let bad = CodeSubmission::code_object(7, shared_object(), &["echo", "no_such_entry"]);
    assert!(inv.allocate(&bad, 64, ModeHint::WarmOk, 1).is_err());
    s.shutdown();
}
