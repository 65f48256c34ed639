/* tslint:disable */
/* eslint-disable */

/**
 * Histogram of the tomography reading `I(1 + cos Δφ)` with `I = 1` over
 * `bins` equal bins of `[0, 2]`, alongside the expected arcsine counts:
 * `[observed_0, …, observed_{bins−1}, expected_0, …]`.
 */
export function phase_histogram(seed: number, samples: number, bins: number): Float64Array;

/**
 * Analytic secret rate against channel loss, as `[loss, rate, qber, …]`.
 */
export function rate_curve(mu: number, delta_phi: number, visibility: number, ec_efficiency: number, trusted: boolean, max_loss_db: number, step_db: number): Float64Array;

/**
 * One simulated session at `loss_db`: `[rate, rate_se, qber, duty_cycle, final_key_bits]`.
 */
export function simulate_point(seed: number, emissions: number, loss_db: number, mu: number, delta_phi: number, visibility: number, ec_efficiency: number, trusted: boolean): Float64Array;

/**
 * Acceptance and model QBER against the comparator level, as
 * `[threshold, delta_phi, accept_rate_per_basis_hz, qber, …]`.
 */
export function tradeoff(visibility: number, lo: number, hi: number, points: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly phase_histogram: (a: number, b: number, c: number) => [number, number, number, number];
    readonly rate_curve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly simulate_point: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly tradeoff: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
