/* tslint:disable */
/* eslint-disable */

export function fuseMap(w1: number, w2: number, w3: number, epsilon: number): Float64Array;

export function fuseSize(): number;

export function fusionCoefficients(w1: number, w2: number, w3: number, epsilon: number): Float64Array;

export function impulseMap(dilation: number, seed: bigint, branch: number): Float64Array;

export function impulseSize(): number;

/**
 * JSON-encoded [`RoutingView`].
 */
export function routingView(side: number, regions_per_side: number, top_k: number, seed: bigint): string;

export function supportRadius(map: Float64Array): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly fuseMap: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly fuseSize: () => number;
    readonly fusionCoefficients: (a: number, b: number, c: number, d: number) => [number, number];
    readonly impulseMap: (a: number, b: bigint, c: number) => [number, number, number, number];
    readonly impulseSize: () => number;
    readonly routingView: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly supportRadius: (a: number, b: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
