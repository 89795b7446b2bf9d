/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const ema_trajectories: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const kde_overlap: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const routing_distribution: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
