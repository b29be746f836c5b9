/*
 *  Copyright 2026 The vesselseg Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#ifndef VESSELSEG_H_
#define VESSELSEG_H_

#include <stddef.h>
#include <stdint.h>

#if defined(VESSELSEG_BUILDING)
#define VS_API __attribute__((visibility("default")))
#else
#define VS_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as process exit codes. */
typedef enum vs_status {
  VS_OK = 0,
  VS_ERR_INTERNAL = 1,
  VS_ERR_CONFIG = 2,
  VS_ERR_DATA = 3,
  VS_ERR_NUMERIC = 4,
  VS_ERR_ARGUMENT = 5
} vs_status;

typedef enum vs_sample_kind { VS_U8 = 0, VS_U16 = 1, VS_F32 = 2 } vs_sample_kind;

VS_API const char* vs_version(void);

/* Message of the last failed call on this thread; "" after a success. */
VS_API const char* vs_last_error(void);

/* 0 restores the OpenMP default. */
VS_API vs_status vs_set_threads(int n);

/* ---- configuration ---------------------------------------------------- */

typedef struct vs_config vs_config;

VS_API vs_status vs_config_default(vs_config** out);
VS_API vs_status vs_config_load(const char* path, vs_config** out);
/* Dotted key, JSON or bare-string value: "stage1.updates", "2000". */
VS_API vs_status vs_config_set(vs_config* c, const char* key, const char* value);
/* Writes at most cap bytes including the terminator; *needed receives the
   full size. buf may be NULL when cap is 0. */
VS_API vs_status vs_config_to_json(const vs_config* c, char* buf, size_t cap, size_t* needed);
VS_API void vs_config_free(vs_config* c);

/* ---- pipeline commands -------------------------------------------------- */

/* processed, when not NULL, receives the number of stacks handled. */
VS_API vs_status vs_preprocess(const vs_config* c, size_t* processed);
VS_API vs_status vs_train(const vs_config* c, size_t* processed);
/* stacks: manifest ids or TIFF paths, n = 0 for every manifest entry.
   checkpoint may be NULL for the configured preset's final checkpoint. */
VS_API vs_status vs_infer(const vs_config* c, const char* const* stacks, size_t n, const char* checkpoint,
                          size_t* processed);
VS_API vs_status vs_evaluate(const vs_config* c, int all_stacks, size_t* processed);
VS_API vs_status vs_report(const vs_config* c, size_t* processed);
/* Writes stacks/, labels/ and manifest.txt under dir. */
VS_API vs_status vs_synth(const char* dir, int stacks, int test_stacks, int nz, int ny, int nx, uint64_t seed);

/* ---- volumes ------------------------------------------------------------ */

typedef struct vs_volume vs_volume;

VS_API vs_status vs_volume_create(int nz, int ny, int nx, vs_volume** out);
VS_API vs_status vs_volume_read_tiff(const char* path, vs_volume** out);
VS_API vs_status vs_volume_write_tiff(const vs_volume* v, const char* path, vs_sample_kind kind);
VS_API void vs_volume_dims(const vs_volume* v, int* nz, int* ny, int* nx);
/* z-major, then y, then x. */
VS_API float* vs_volume_data(vs_volume* v);
VS_API void vs_volume_free(vs_volume* v);

/* ---- networks ----------------------------------------------------------- */

typedef struct vs_network vs_network;

VS_API vs_status vs_network_create(const char* preset, double width_scale, uint64_t seed, vs_network** out);
VS_API vs_status vs_network_load(const char* checkpoint, vs_network** out);
VS_API vs_status vs_network_save(const vs_network* n, const char* path);
VS_API size_t vs_network_param_count(const vs_network* n);
/* Number of input channels (1, or 2 for recursive presets). */
VS_API int vs_network_arity(const vs_network* n);
/* Dense vessel probability aligned voxel for voxel with the inputs. */
VS_API vs_status vs_network_infer(const vs_network* n, const vs_volume* const* channels, size_t count, int fast,
                                  vs_volume** prob);
VS_API void vs_network_free(vs_network* n);

/* ---- small utilities ------------------------------------------------------ */

/* schedule: "VD2D" or "VD2D3D". */
VS_API vs_status vs_lr_at(const char* schedule, uint64_t update, double* lr);

#ifdef __cplusplus
}
#endif

#endif /* VESSELSEG_H_ */
