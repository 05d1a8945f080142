/**
 * Acceptance: a scripted paint session saved by the client deserializes
 * server-side to exactly the painted voxel coordinates, and the outline the
 * client would render equals the server's corrected contour.
 */

import { execFileSync } from 'node:child_process';
import { mkdtempSync, rmSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';
import { afterAll, describe, expect, it } from 'vitest';

import { AnnotationLayers, mergeCorrected } from '../src/annotation.js';
import { boxDescrip, encodeNifti } from '../src/nifti.js';
import { boxShape, LABEL_BACKGROUND, LABEL_FOREGROUND, Vec3 } from '../src/types.js';

const DIMS: Vec3 = [16, 16, 8];
const BOX = { min: [2, 2, 1] as Vec3, max: [13, 13, 6] as Vec3 };

const PYTHON_PROBE = (() => {
  try {
    execFileSync('python3', ['-c', 'import corrseg'], { stdio: 'pipe' });
    return true;
  } catch {
    return false;
  }
})();

const workdir = mkdtempSync(join(tmpdir(), 'corrseg-ui-'));
afterAll(() => rmSync(workdir, { recursive: true, force: true }));

function serverDeserialize(path: string): { fg: number[][]; bg: number[][]; box: number[][] } {
  const script = [
    'import json, sys',
    'from corrseg.annotation import deserialize',
    'ann = deserialize(sys.argv[1])',
    'print(json.dumps({',
    '  "fg": ann.fg.tolist(),',
    '  "bg": ann.bg.tolist(),',
    '  "box": [list(ann.box.min_corner), list(ann.box.max_corner)],',
    '}))',
  ].join('\n');
  return JSON.parse(execFileSync('python3', ['-c', script, path], { encoding: 'utf-8' }));
}

describe.skipIf(!PYTHON_PROBE)('client/server round trip', () => {
  it('painted voxels deserialize server-side to identical coordinates', () => {
    const layers = new AnnotationLayers(DIMS);
    layers.paintDisc('axial', 3, 6, 6, 2, 'fg', BOX);
    layers.paintDisc('axial', 4, 10, 10, 1, 'bg', BOX);
    layers.paintDisc('axial', 3, 6, 6, 1, 'erase', BOX); // carve the disc center
    const payload = encodeNifti(DIMS, layers.labels, { descrip: boxDescrip(BOX) });
    const path = join(workdir, 'vol7.nii');
    writeFileSync(path, payload);

    const ann = serverDeserialize(path);
    const sortTriples = (vs: number[][]) =>
      vs.map((v) => v.join(',')).sort();
    expect(sortTriples(ann.fg)).toEqual(
      sortTriples(layers.voxelsWithLabel(LABEL_FOREGROUND)),
    );
    expect(sortTriples(ann.bg)).toEqual(
      sortTriples(layers.voxelsWithLabel(LABEL_BACKGROUND)),
    );
    expect(ann.box).toEqual([BOX.min, BOX.max]);
    expect(ann.fg.length).toBeGreaterThan(0);
    expect(ann.bg.length).toBeGreaterThan(0);
  });

  it('client outline mask equals server-side merge_corrected', () => {
    const layers = new AnnotationLayers(DIMS);
    layers.paintDisc('axial', 2, 5, 5, 1, 'fg', BOX);
    layers.paintDisc('axial', 3, 8, 8, 1, 'bg', BOX);
    const shape = boxShape(BOX);
    const seg = new Uint8Array(shape[0] * shape[1] * shape[2]);
    for (let i = 0; i < seg.length; i += 3) seg[i] = 1;

    const clientCorrected = mergeCorrected(seg, layers, BOX);

    const labelsPath = join(workdir, 'vol8.nii');
    writeFileSync(labelsPath, encodeNifti(DIMS, layers.labels, { descrip: boxDescrip(BOX) }));
    const segPath = join(workdir, 'seg8.nii');
    writeFileSync(segPath, encodeNifti(shape, seg, { descrip: boxDescrip(BOX) }));

    const script = [
      'import json, sys',
      'import numpy as np',
      'from corrseg import nifti',
      'from corrseg.annotation import Segmentation, deserialize, merge_corrected',
      'ann = deserialize(sys.argv[1])',
      'ann.volume_id = "vol8"',
      'mask, _, _ = nifti.read(sys.argv[2])',
      'seg = Segmentation("vol8", ann.box, mask != 0)',
      'corrected = merge_corrected(seg, ann)',
      'print(json.dumps(corrected.astype(int).flatten(order="F").tolist()))',
    ].join('\n');
    const serverCorrected: number[] = JSON.parse(
      execFileSync('python3', ['-c', script, labelsPath, segPath], { encoding: 'utf-8' }),
    );
    expect(Array.from(clientCorrected)).toEqual(serverCorrected);
  });
});
