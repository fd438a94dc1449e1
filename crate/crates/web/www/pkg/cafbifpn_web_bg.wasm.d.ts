/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const fuseMap: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const fuseSize: () => number;
export const fusionCoefficients: (a: number, b: number, c: number, d: number) => [number, number];
export const impulseMap: (a: number, b: bigint, c: number) => [number, number, number, number];
export const impulseSize: () => number;
export const routingView: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const supportRadius: (a: number, b: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
