/* tslint:disable */
/* eslint-disable */

/**
 * A step-wise trainer for a small tanh neural ODE on `x -> sin(pi x)`
 * style regression data; the page advances it a few steps per frame.
 */
export class Trainer {
    free(): void;
    [Symbol.dispose](): void;
    constructor(hidden: number, n_particles: number, sigma: number, gamma: number, seed: bigint);
    /**
     * Advances `k` iterations and reports the state after them.
     */
    step(k: number): string;
}

/**
 * Two synchronously coupled runs from different initial laws; returns the
 * paired distance over training time and the fitted log-slope.
 */
export function contraction_demo(sigma: number, kappa: number, gamma: number, n_iters: number, n_particles: number, seed: bigint): string;

/**
 * Trains the linear-control toy and compares the particle histogram at
 * `node` with the Gibbs density built from the final cloud.
 */
export function gibbs_demo(sigma: number, kappa: number, n_particles: number, n_iters: number, node: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_trainer_free: (a: number, b: number) => void;
    readonly contraction_demo: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly gibbs_demo: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly trainer_new: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
    readonly trainer_step: (a: number, b: number) => [number, number, number, number];
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
