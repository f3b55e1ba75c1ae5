/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const attention_spectrum: (a: number, b: number, c: number, d: number) => [number, number];
export const mac_curve: (a: number, b: number, c: number, d: number) => [number, number];
export const select_tokens: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
