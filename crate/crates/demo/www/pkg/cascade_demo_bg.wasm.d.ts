/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const explore: (a: number, b: number, c: number) => [number, number, number, number];
export const stage_plan: (a: number, b: number) => [number, number, number, number];
export const truncation: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
