/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_trainer_free: (a: number, b: number) => void;
export const contraction_demo: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const gibbs_demo: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const trainer_new: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
export const trainer_step: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
