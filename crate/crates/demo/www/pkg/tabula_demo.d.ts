/* tslint:disable */
/* eslint-disable */

/**
 * One masked lookup of `x`, wrapped into the k-bit domain.
 */
export function lookup_demo(x: number, k: number, _function: string, seed: bigint): string;

/**
 * Per-party table storage for `activations` activations at k = 1..=k_max.
 */
export function storage_curve(activations: bigint, k_max: number): string;

/**
 * Outcome counts of local share truncation of a fixed `x >= 0` over
 * `trials` random sharings.
 */
export function truncation_histogram(x: number, divisor_bits: number, modulus: bigint, trials: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly lookup_demo: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly storage_curve: (a: bigint, b: number) => [number, number];
    readonly truncation_histogram: (a: number, b: number, c: bigint, d: number, e: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
